//! End-to-end experiment runner: JSON config, the pipeline from cohort to
//! fidelity report, artifact writing, SVG plots and the preset grid.

mod artifacts;
mod config;
mod grid;
mod plots;
mod run;

pub use artifacts::{sha256_hex, write_atomic, Manifest};
pub use config::{
    default_patients, labels, load_config, parse_config, CohortPlan, CsvSource, DecodingMode, GenerateSpec,
    DecodingSection, ExperimentConfig, IrregularitySection, ModelSection, ResolvedExperiment,
    SourceConfig, SplitSection, StageSeeds, SyntheticSource, TrainingSection,
};
pub use grid::{preset, run_dirs, run_grid, GridEntry, GridOptions, GridRun, GridSummary, GRID_FILE};
pub use plots::{emit_plots, heatmap_svg, histogram_svg, plot_names};
pub use run::{
    rerender_plots, run_experiment, run_experiment_file, ExperimentReport, RunOutcome, Timing,
    ASSOC_REAL_FILE, ASSOC_SYNTH_FILE, MANIFEST_FILE, MODEL_FILE, PLOTS_DIR, REPORT_FILE, TIMING_FILE,
};

use crate::cohort::{Cohort, WindowColumns};
use crate::error::{Error, Result};
use crate::models::{rollout_batch, Decoding, Model};
use crate::sampling::{encode_complete_window, SplitResult};

/// Rollouts are generated this many patients at a time.
const ROLLOUT_CHUNK: usize = 256;

/// Real and synthesized prediction windows of the test patients, pooled
/// over patients and steps. Each test patient conditions on its complete
/// observation window.
pub fn synthesize_test_windows(
    model: &Model,
    cohort: &Cohort,
    split: &SplitResult,
    decoding: Decoding,
) -> Result<(WindowColumns, WindowColumns)> {
    let schema = &cohort.schema;
    let normalizer = model
        .calibration
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::State("model has no fitted normaliser".into()))?;
    let (first, last) = split.prediction_window();
    let real = WindowColumns::from_cohort(cohort, &split.test, first, last);
    let mut synth = WindowColumns::with_features(schema.n_numeric(), schema.n_categorical());
    for (c, chunk) in split.test.chunks(ROLLOUT_CHUNK).enumerate() {
        let obs = chunk
            .iter()
            .map(|&p| {
                encode_complete_window(
                    &cohort.patients[p],
                    split.observation_length,
                    schema,
                    normalizer,
                    model.calibration.dt_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // Each chunk gets its own sampling seed so patients never share a
        // substream.
        let decoding = match decoding {
            Decoding::Sample { seed } => Decoding::Sample {
                seed: crate::rng::derive_seed(seed, &format!("chunk-{c}")),
            },
            Decoding::Argmax => Decoding::Argmax,
        };
        for w in rollout_batch(model, schema, &obs, split.prediction_length, decoding)? {
            w.append_to(&mut synth);
        }
    }
    Ok((real, synth))
}
