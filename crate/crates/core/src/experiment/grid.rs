use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{json_bytes, write_atomic};
use super::config::{
    DecodingMode, DecodingSection, ExperimentConfig, IrregularitySection, ModelSection, SourceConfig,
    SyntheticSource, TrainingSection,
};
use super::run::{run_experiment, RunOutcome};
use crate::cohort::DatasetId;
use crate::error::{Error, Result};
use crate::fidelity::MarginalKind;
use crate::models::ModelKind;
use crate::sampling::IrregularitySpec;

pub const GRID_FILE: &str = "grid.json";

/// Knobs of a preset grid. `patients` and `epochs` shrink the runs for
/// quick checks; left unset, the preset uses the original cohort sizes
/// and 10 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    pub master_seed: u64,
    pub patients: Option<usize>,
    pub epochs: Option<usize>,
    /// Worker threads; `None` uses one per core.
    pub workers: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            master_seed: 2024,
            patients: None,
            epochs: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Named grid presets. Only `paper` exists. It crosses the two datasets and
/// the two models with a moderate and a severe G_max, all with sampled
/// decoding. Every run shares the master seed, so runs on one dataset see
/// the same cohort and split.
pub fn preset(name: &str, out: &Path, opts: &GridOptions) -> Result<Vec<GridRun>> {
    if name != "paper" {
        return Err(Error::config("preset", format!("unknown grid preset `{name}` (expected paper)")));
    }
    let mut runs = Vec::with_capacity(8);
    for dataset in [DatasetId::ArtHiv, DatasetId::Hypotension] {
        for kind in [ModelKind::LstmSeq2seq, ModelKind::EthosLite] {
            for g_max in IrregularitySpec::presets(dataset)? {
                let name = format!("{dataset}_{kind}_g{g_max}");
                let config = ExperimentConfig {
                    dataset,
                    source: SourceConfig::Synthetic(SyntheticSource {
                        n_patients: opts.patients,
                        ..Default::default()
                    }),
                    model: ModelSection { kind, seed: None },
                    split: Default::default(),
                    irregularity: IrregularitySection {
                        g_max,
                        resample_per_epoch: false,
                        seed: None,
                    },
                    training: TrainingSection {
                        epochs: opts.epochs,
                        ..Default::default()
                    },
                    decoding: DecodingSection {
                        mode: DecodingMode::Sample,
                        seed: None,
                    },
                    output_dir: out.join(&name),
                    master_seed: opts.master_seed,
                };
                runs.push(GridRun { name, config });
            }
        }
    }
    Ok(runs)
}

/// Headline numbers of one grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub name: String,
    pub dataset: DatasetId,
    pub model: String,
    pub g_max: u32,
    pub first_loss: f64,
    pub final_loss: f64,
    pub max_ks: Option<f64>,
    pub max_tv: Option<f64>,
    pub correlation_gap: Option<f64>,
    pub report_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub master_seed: u64,
    pub runs: Vec<GridEntry>,
}

fn entry(name: &str, out: &RunOutcome) -> GridEntry {
    let f = &out.report.fidelity;
    let max_of = |kind: MarginalKind| {
        f.marginals
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| m.value)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    };
    GridEntry {
        name: name.to_string(),
        dataset: f.dataset,
        model: f.model.clone(),
        g_max: f.g_max,
        first_loss: out.report.training.first_loss(),
        final_loss: out.report.training.final_loss(),
        max_ks: max_of(MarginalKind::Ks),
        max_tv: max_of(MarginalKind::Tv),
        correlation_gap: f.correlation_gap.gap,
        report_sha256: out.manifest.files[super::run::REPORT_FILE].clone(),
    }
}

/// Runs every config on a worker pool and writes `grid.json` into `out`.
/// Results are collected in preset order whatever the scheduling. The
/// first failing run, in that order, is reported.
pub fn run_grid(runs: &[GridRun], out: &Path, opts: &GridOptions) -> Result<GridSummary> {
    for r in runs {
        r.config.resolve(Path::new("."))?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = opts.workers {
        if w == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<RunOutcome>> = pool.install(|| {
        runs.par_iter()
            .map(|r| run_experiment(&r.config, Path::new(".")))
            .collect()
    });
    let mut entries = Vec::with_capacity(runs.len());
    for (r, res) in runs.iter().zip(results) {
        let outcome = res.map_err(|e| Error::Run {
            run: r.name.clone(),
            source: Box::new(e),
        })?;
        entries.push(entry(&r.name, &outcome));
    }
    let summary = GridSummary {
        master_seed: opts.master_seed,
        runs: entries,
    };
    write_atomic(&out.join(GRID_FILE), &json_bytes(&summary)?)?;
    Ok(summary)
}

/// Output directories of a preset, in order.
pub fn run_dirs(runs: &[GridRun]) -> Vec<PathBuf> {
    runs.iter().map(|r| r.config.output_dir.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_has_eight_runs() {
        let runs = preset("paper", Path::new("/tmp/g"), &GridOptions::default()).unwrap();
        let names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "art_hiv_lstm_seq2seq_g10",
                "art_hiv_lstm_seq2seq_g35",
                "art_hiv_ethos_lite_g10",
                "art_hiv_ethos_lite_g35",
                "hypotension_lstm_seq2seq_g8",
                "hypotension_lstm_seq2seq_g28",
                "hypotension_ethos_lite_g8",
                "hypotension_ethos_lite_g28",
            ]
        );
        for r in &runs {
            let plan = r.config.resolve(Path::new(".")).unwrap();
            assert_eq!(plan.seeds.master, 2024);
        }
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let err = preset("tiny", Path::new("/tmp"), &GridOptions::default()).unwrap_err();
        assert!(err.is_validation());
    }
}
