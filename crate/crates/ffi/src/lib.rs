//! C ABI over the trajbench library.
//!
//! Every function returns a [`TbStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`tb_last_error`] until the next call
//! on the same thread. Handles are opaque and must be released with their
//! matching `*_free` function. Strings returned to the caller are released
//! with [`tb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use trajbench::cohort::make_schema;
use trajbench::experiment::{run_experiment_file, ExperimentReport};
use trajbench::fidelity::{cramers_v, ks_statistic, tv_distance, MarginalKind};
use trajbench::models::{load_model, rollout, Decoding, Model, SynthesizedWindow};
use trajbench::tensor::Tensor;
use trajbench::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was malformed (bad UTF-8, inconsistent sizes).
    InvalidArgument = 2,
    /// Configuration failed validation.
    Config = 3,
    /// File could not be read or written.
    Io = 4,
    /// A file was read but its contents are malformed.
    Format = 5,
    /// Any other failure while running.
    Runtime = 6,
    /// The result is mathematically undefined (for example a degenerate
    /// association).
    Undefined = 7,
    /// A panic was caught at the boundary.
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> TbStatus {
    match e {
        Error::Config { .. } => TbStatus::Config,
        Error::Io { .. } => TbStatus::Io,
        Error::Format(_) | Error::Ingestion { .. } | Error::Json(_) | Error::Csv(_) => TbStatus::Format,
        Error::Stage { source, .. } | Error::Run { source, .. } => match status_of(source) {
            TbStatus::Config => TbStatus::Runtime,
            s => s,
        },
        _ => TbStatus::Runtime,
    }
}

struct Fail(TbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TbStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(TbStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TbStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failure on this thread, or null if the last call
/// succeeded. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// Metrics

/// Two-sample Kolmogorov-Smirnov statistic.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_ks_statistic(a: *const f64, na: usize, b: *const f64, nb: usize, out: *mut f64) -> TbStatus {
    guard(|| {
        let (a, b) = (slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?);
        let out = out_arg(out, "out")?;
        *out = ks_statistic(a, b)?;
        Ok(())
    })
}

/// Total variation distance between two level-count vectors of length `k`.
///
/// # Safety
/// `p` and `q` must point to `k` readable counts; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_tv_distance(p: *const u64, q: *const u64, k: usize, out: *mut f64) -> TbStatus {
    guard(|| {
        let (p, q) = (slice_arg(p, k, "p")?, slice_arg(q, k, "q")?);
        let out = out_arg(out, "out")?;
        *out = tv_distance(p, q)?;
        Ok(())
    })
}

/// Cramér's V between two level-index columns of length `n`. Returns
/// `Undefined` when either column has a single observed level.
///
/// # Safety
/// `x` and `y` must point to `n` readable indices; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_cramers_v(x: *const usize, y: *const usize, n: usize, out: *mut f64) -> TbStatus {
    guard(|| {
        let (x, y) = (slice_arg(x, n, "x")?, slice_arg(y, n, "y")?);
        let out = out_arg(out, "out")?;
        match cramers_v(x, y) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => Err(Fail(TbStatus::Undefined, "association is undefined".into())),
        }
    })
}

// Experiments

/// Result of one experiment run.
pub struct TbReport {
    report: ExperimentReport,
    names: Vec<CString>,
}

/// One marginal metric. `feature` is owned by the report.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TbMarginal {
    pub feature: *const c_char,
    /// 0 for KS (numeric), 1 for TV (categorical).
    pub kind: u32,
    pub value: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
}

/// Runs the experiment described by a JSON config file and writes its
/// artifacts.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_run_experiment(config_path: *const c_char, out: *mut *mut TbReport) -> TbStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let outcome = run_experiment_file(Path::new(path))?;
        let names = outcome
            .report
            .fidelity
            .marginals
            .iter()
            .map(|m| CString::new(m.feature.replace('\0', " ")).expect("NUL removed"))
            .collect();
        *out = Box::into_raw(Box::new(TbReport {
            report: outcome.report,
            names,
        }));
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a live handle from [`tb_run_experiment`].
#[no_mangle]
pub unsafe extern "C" fn tb_report_free(report: *mut TbReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Number of marginal metrics (one per feature).
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_report_marginal_count(report: *const TbReport, out: *mut usize) -> TbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        *out_arg(out, "out")? = r.report.fidelity.marginals.len();
        Ok(())
    })
}

/// Marginal metric `index`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_report_marginal(report: *const TbReport, index: usize, out: *mut TbMarginal) -> TbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out_arg(out, "out")?;
        let m = r.report.fidelity.marginals.get(index).ok_or_else(|| {
            Fail(
                TbStatus::InvalidArgument,
                format!("index {index} out of range ({} marginals)", r.names.len()),
            )
        })?;
        *out = TbMarginal {
            feature: r.names[index].as_ptr(),
            kind: match m.kind {
                MarginalKind::Ks => 0,
                MarginalKind::Tv => 1,
            },
            value: m.value,
            n_real: m.n_real,
            n_synthetic: m.n_synthetic,
        };
        Ok(())
    })
}

/// Correlation gap of the report. Returns `Undefined` if no tile is defined
/// in both matrices.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_report_correlation_gap(report: *const TbReport, out: *mut f64) -> TbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out_arg(out, "out")?;
        match r.report.fidelity.correlation_gap.gap {
            Some(g) => {
                *out = g;
                Ok(())
            }
            None => Err(Fail(TbStatus::Undefined, "no mutually defined tiles".into())),
        }
    })
}

/// Mean loss of the first and last training epochs.
///
/// # Safety
/// `report` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_report_losses(report: *const TbReport, first: *mut f64, last: *mut f64) -> TbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let (first, last) = (out_arg(first, "first")?, out_arg(last, "last")?);
        *first = r.report.training.first_loss();
        *last = r.report.training.final_loss();
        Ok(())
    })
}

/// The full report as JSON, identical to `report.json`. Free the result
/// with [`tb_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_report_json(report: *const TbReport, out: *mut *mut c_char) -> TbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out_arg(out, "out")?;
        let json = serde_json::to_string_pretty(&r.report).map_err(Error::from)?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

// Models

/// A trained model loaded from a parameter file.
pub struct TbModel {
    model: Model,
}

/// Loads a parameter file written by an experiment run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_load(path: *const c_char, out: *mut *mut TbModel) -> TbStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(TbModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle from [`tb_model_load`].
#[no_mangle]
pub unsafe extern "C" fn tb_model_free(model: *mut TbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Shape facts of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TbModelInfo {
    /// 0 for the LSTM encoder-decoder, 1 for the causal Transformer.
    pub kind: u32,
    /// Width of one encoded visit.
    pub input_dim: usize,
    pub n_numeric: usize,
    pub n_categorical: usize,
    pub parameter_count: usize,
    pub max_positions: usize,
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_info(model: *const TbModel, out: *mut TbModelInfo) -> TbStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        *out_arg(out, "out")? = TbModelInfo {
            kind: match m.kind() {
                trajbench::models::ModelKind::LstmSeq2seq => 0,
                trajbench::models::ModelKind::EthosLite => 1,
            },
            input_dim: m.config.input_dim,
            n_numeric: m.layout.n_numeric,
            n_categorical: m.layout.level_counts.len(),
            parameter_count: m.parameter_count(),
            max_positions: m.config.max_positions,
        };
        Ok(())
    })
}

/// A synthesized prediction window.
pub struct TbWindow {
    window: SynthesizedWindow,
}

/// Generates `horizon` steps after an observation window.
///
/// `observation` holds `rows` encoded visits of `input_dim` values each,
/// row-major, encoded with the model's normaliser. `dataset` names the
/// shipped schema the model was trained on. With `sample` nonzero, steps
/// are drawn with `seed`; otherwise the most likely step is taken.
///
/// # Safety
/// `model` must be a live handle, `dataset` a NUL-terminated string,
/// `observation` must point to `rows * input_dim` doubles and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_rollout(
    model: *const TbModel,
    dataset: *const c_char,
    observation: *const f64,
    rows: usize,
    horizon: usize,
    sample: i32,
    seed: u64,
    out: *mut *mut TbWindow,
) -> TbStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let schema = make_schema(str_arg(dataset, "dataset")?)?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = m.config.input_dim;
        let n = rows
            .checked_mul(d)
            .ok_or_else(|| Fail(TbStatus::InvalidArgument, "rows * input_dim overflows".into()))?;
        let data = slice_arg(observation, n, "observation")?.to_vec();
        let obs = Tensor::new(vec![rows, d], data)?;
        let decoding = if sample != 0 {
            Decoding::Sample { seed }
        } else {
            Decoding::Argmax
        };
        let window = rollout(m, &schema, &obs, horizon, decoding)?;
        *out = Box::into_raw(Box::new(TbWindow { window }));
        Ok(())
    })
}

/// # Safety
/// `window` must be null or a live handle from [`tb_model_rollout`].
#[no_mangle]
pub unsafe extern "C" fn tb_window_free(window: *mut TbWindow) {
    if !window.is_null() {
        drop(Box::from_raw(window));
    }
}

/// Number of generated steps.
///
/// # Safety
/// `window` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_window_len(window: *const TbWindow, out: *mut usize) -> TbStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        *out_arg(out, "out")? = w.window.len();
        Ok(())
    })
}

/// Copies the numeric values of step `step` (schema units) into `buf`,
/// which holds `len` doubles and must fit every numeric feature.
///
/// # Safety
/// `window` must be a live handle; `buf` must point to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn tb_window_numeric(window: *const TbWindow, step: usize, buf: *mut f64, len: usize) -> TbStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        let row = w
            .window
            .numeric
            .get(step)
            .ok_or_else(|| Fail(TbStatus::InvalidArgument, format!("step {step} out of range")))?;
        copy_row(row, buf, len)
    })
}

/// Copies the level indices of step `step` into `buf`, which holds `len`
/// entries and must fit every categorical feature.
///
/// # Safety
/// `window` must be a live handle; `buf` must point to `len` writable
/// entries.
#[no_mangle]
pub unsafe extern "C" fn tb_window_categorical(
    window: *const TbWindow,
    step: usize,
    buf: *mut usize,
    len: usize,
) -> TbStatus {
    guard(|| {
        let w = window.as_ref().ok_or_else(|| null("window"))?;
        let row = w
            .window
            .categorical
            .get(step)
            .ok_or_else(|| Fail(TbStatus::InvalidArgument, format!("step {step} out of range")))?;
        copy_row(row, buf, len)
    })
}

unsafe fn copy_row<T: Copy>(row: &[T], buf: *mut T, len: usize) -> Result<(), Fail> {
    if len < row.len() {
        return Err(Fail(
            TbStatus::InvalidArgument,
            format!("buffer holds {len} values, step has {}", row.len()),
        ));
    }
    if row.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(row.as_ptr(), buf, row.len());
    Ok(())
}
