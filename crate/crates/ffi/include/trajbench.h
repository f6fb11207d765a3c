#ifndef TRAJBENCH_H
#define TRAJBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  // A required pointer argument was null.
  TB_STATUS_NULL_ARGUMENT = 1,
  // An argument was malformed (bad UTF-8, inconsistent sizes).
  TB_STATUS_INVALID_ARGUMENT = 2,
  // Configuration failed validation.
  TB_STATUS_CONFIG = 3,
  // File could not be read or written.
  TB_STATUS_IO = 4,
  // A file was read but its contents are malformed.
  TB_STATUS_FORMAT = 5,
  // Any other failure while running.
  TB_STATUS_RUNTIME = 6,
  // The result is mathematically undefined (for example a degenerate
  // association).
  TB_STATUS_UNDEFINED = 7,
  // A panic was caught at the boundary.
  TB_STATUS_PANIC = 8,
} TbStatus;

// A trained model loaded from a parameter file.
typedef struct TbModel TbModel;

// Result of one experiment run.
typedef struct TbReport TbReport;

// A synthesized prediction window.
typedef struct TbWindow TbWindow;

// One marginal metric. `feature` is owned by the report.
typedef struct TbMarginal {
  const char *feature;
  // 0 for KS (numeric), 1 for TV (categorical).
  uint32_t kind;
  double value;
  size_t n_real;
  size_t n_synthetic;
} TbMarginal;

// Shape facts of a loaded model.
typedef struct TbModelInfo {
  // 0 for the LSTM encoder-decoder, 1 for the causal Transformer.
  uint32_t kind;
  // Width of one encoded visit.
  size_t input_dim;
  size_t n_numeric;
  size_t n_categorical;
  size_t parameter_count;
  size_t max_positions;
} TbModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if the last call
// succeeded. The pointer stays valid until the next call on this thread.
const char *tb_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a pointer obtained from this library and not yet
// freed.
void tb_string_free(char *s);

// Library version as a static NUL-terminated string.
const char *tb_version(void);

// Two-sample Kolmogorov-Smirnov statistic.
//
// # Safety
// `a` and `b` must point to `na` and `nb` readable doubles; `out` must be
// writable.
enum TbStatus tb_ks_statistic(const double *a, size_t na, const double *b, size_t nb, double *out);

// Total variation distance between two level-count vectors of length `k`.
//
// # Safety
// `p` and `q` must point to `k` readable counts; `out` must be writable.
enum TbStatus tb_tv_distance(const uint64_t *p, const uint64_t *q, size_t k, double *out);

// Cramér's V between two level-index columns of length `n`. Returns
// `Undefined` when either column has a single observed level.
//
// # Safety
// `x` and `y` must point to `n` readable indices; `out` must be writable.
enum TbStatus tb_cramers_v(const size_t *x, const size_t *y, size_t n, double *out);

// Runs the experiment described by a JSON config file and writes its
// artifacts.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out` must be writable.
enum TbStatus tb_run_experiment(const char *config_path, struct TbReport **out);

// # Safety
// `report` must be null or a live handle from [`tb_run_experiment`].
void tb_report_free(struct TbReport *report);

// Number of marginal metrics (one per feature).
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum TbStatus tb_report_marginal_count(const struct TbReport *report, size_t *out);

// Marginal metric `index`.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum TbStatus tb_report_marginal(const struct TbReport *report,
                                 size_t index,
                                 struct TbMarginal *out);

// Correlation gap of the report. Returns `Undefined` if no tile is defined
// in both matrices.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum TbStatus tb_report_correlation_gap(const struct TbReport *report, double *out);

// Mean loss of the first and last training epochs.
//
// # Safety
// `report` must be a live handle; both outputs must be writable.
enum TbStatus tb_report_losses(const struct TbReport *report, double *first, double *last);

// The full report as JSON, identical to `report.json`. Free the result
// with [`tb_string_free`].
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum TbStatus tb_report_json(const struct TbReport *report, char **out);

// Loads a parameter file written by an experiment run.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TbStatus tb_model_load(const char *path, struct TbModel **out);

// # Safety
// `model` must be null or a live handle from [`tb_model_load`].
void tb_model_free(struct TbModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum TbStatus tb_model_info(const struct TbModel *model, struct TbModelInfo *out);

// Generates `horizon` steps after an observation window.
//
// `observation` holds `rows` encoded visits of `input_dim` values each,
// row-major, encoded with the model's normaliser. `dataset` names the
// shipped schema the model was trained on. With `sample` nonzero, steps
// are drawn with `seed`; otherwise the most likely step is taken.
//
// # Safety
// `model` must be a live handle, `dataset` a NUL-terminated string,
// `observation` must point to `rows * input_dim` doubles and `out` must be
// writable.
enum TbStatus tb_model_rollout(const struct TbModel *model,
                               const char *dataset,
                               const double *observation,
                               size_t rows,
                               size_t horizon,
                               int32_t sample,
                               uint64_t seed,
                               struct TbWindow **out);

// # Safety
// `window` must be null or a live handle from [`tb_model_rollout`].
void tb_window_free(struct TbWindow *window);

// Number of generated steps.
//
// # Safety
// `window` must be a live handle; `out` must be writable.
enum TbStatus tb_window_len(const struct TbWindow *window, size_t *out);

// Copies the numeric values of step `step` (schema units) into `buf`,
// which holds `len` doubles and must fit every numeric feature.
//
// # Safety
// `window` must be a live handle; `buf` must point to `len` writable
// doubles.
enum TbStatus tb_window_numeric(const struct TbWindow *window,
                                size_t step,
                                double *buf,
                                size_t len);

// Copies the level indices of step `step` into `buf`, which holds `len`
// entries and must fit every categorical feature.
//
// # Safety
// `window` must be a live handle; `buf` must point to `len` writable
// entries.
enum TbStatus tb_window_categorical(const struct TbWindow *window,
                                    size_t step,
                                    size_t *buf,
                                    size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJBENCH_H */
