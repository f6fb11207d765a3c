use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::artifacts::{json_bytes, sha256_hex, write_atomic, Manifest};
use super::config::{load_config, CohortPlan, ExperimentConfig, ResolvedExperiment, StageSeeds};
use super::plots::{emit_plots, plot_names};
use super::synthesize_test_windows;
use crate::cohort::{generate_synthetic_cohort, load_cohort_csv, Cohort};
use crate::error::{Error, Result};
use crate::fidelity::{fidelity_report, FidelityReport, ReportMeta};
use crate::models::write_model;
use crate::sampling::dual_split;
use crate::training::{train, TrainReport};

pub const REPORT_FILE: &str = "report.json";
pub const ASSOC_REAL_FILE: &str = "assoc_real.csv";
pub const ASSOC_SYNTH_FILE: &str = "assoc_synth.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PLOTS_DIR: &str = "plots";

/// Contents of `report.json`. Holds no wall-clock data, so repeated runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fidelity: FidelityReport,
    pub training: TrainReport,
}

/// Contents of the `timing.json` sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub report: ExperimentReport,
    pub manifest: Manifest,
    pub timing: Timing,
}

fn load_cohort(plan: &CohortPlan) -> Result<Cohort> {
    match plan {
        CohortPlan::Synthetic { spec, seed } => generate_synthetic_cohort(spec, *seed),
        CohortPlan::Csv { path, schema } => load_cohort_csv(path, schema),
    }
}

fn timed<T>(timing: &mut Timing, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.at_stage(stage))?;
    timing.stages.insert(stage.to_string(), t0.elapsed().as_secs_f64());
    Ok(out)
}

/// Runs a config file. Relative paths inside it resolve against its
/// directory.
pub fn run_experiment_file(path: &Path) -> Result<RunOutcome> {
    let cfg = load_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_experiment(&cfg, base)
}

/// Validates `cfg`, then generates or loads the cohort, splits it, trains,
/// rolls out every test patient's prediction window, scores the synthesis
/// and writes all artifacts. Validation failures surface as
/// [`Error::Config`]; later failures are wrapped with their stage name.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<RunOutcome> {
    let plan = cfg.resolve(base_dir)?;
    let mut timing = Timing::default();
    let cohort = timed(&mut timing, "cohort", || load_cohort(&plan.cohort))?;
    let split = timed(&mut timing, "split", || dual_split(&cohort, &plan.split))?;
    let (model, train_report) = timed(&mut timing, "train", || {
        train(plan.model, &cohort, &split, &plan.irregularity, &plan.training)
    })?;
    timing.epoch_seconds = train_report.epoch_seconds.clone();
    let (real, synth) = timed(&mut timing, "rollout", || {
        synthesize_test_windows(&model, &cohort, &split, plan.decoding)
    })?;
    let fidelity = timed(&mut timing, "fidelity", || {
        let meta = ReportMeta {
            dataset: plan.dataset,
            model: plan.model.kind.to_string(),
            g_max: plan.irregularity.g_max,
            provenance: provenance(cfg, &plan),
        };
        fidelity_report(&real, &synth, &plan.schema, meta)
    })?;
    let report = ExperimentReport {
        fidelity,
        training: train_report,
    };
    let mut model_bytes = Vec::new();
    write_model(&model, &mut model_bytes)?;
    let manifest = write_artifacts(&plan.output_dir, cfg, &plan.seeds, &report, &model_bytes, &mut timing)
        .map_err(|e| e.at_stage("write"))?;
    Ok(RunOutcome {
        output_dir: plan.output_dir,
        report,
        manifest,
        timing,
    })
}

fn provenance(cfg: &ExperimentConfig, plan: &ResolvedExperiment) -> serde_json::Value {
    serde_json::json!({
        "config": cfg.echo(),
        "seeds": plan.seeds,
        "train_fraction": plan.split.train_fraction,
        "observation_length": plan.split.observation_length,
        "prediction_length": plan.split.prediction_length,
        "decoding": plan.decoding,
    })
}

fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    seeds: &StageSeeds,
    report: &ExperimentReport,
    model_bytes: &[u8],
    timing: &mut Timing,
) -> Result<Manifest> {
    let t0 = Instant::now();
    let plots = dir.join(PLOTS_DIR);
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (REPORT_FILE.into(), json_bytes(report)?),
        (ASSOC_REAL_FILE.into(), report.fidelity.assoc_real.to_csv()?.into_bytes()),
        (ASSOC_SYNTH_FILE.into(), report.fidelity.assoc_synthetic.to_csv()?.into_bytes()),
        (MODEL_FILE.into(), model_bytes.to_vec()),
    ];
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
    }
    let written = emit_plots(&report.fidelity, &plots)?;
    for (name, path) in plot_names(&report.fidelity).into_iter().zip(written) {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((format!("{PLOTS_DIR}/{name}"), bytes));
    }
    let manifest = Manifest {
        config: cfg.echo(),
        seeds: serde_json::to_value(seeds)?,
        files: files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), &json_bytes(&manifest)?)?;
    timing.stages.insert("write".into(), t0.elapsed().as_secs_f64());
    write_atomic(&dir.join(TIMING_FILE), &json_bytes(timing)?)?;
    Ok(manifest)
}

/// Reads `report.json` from a run directory and re-renders its plots.
pub fn rerender_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let path = run_dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    emit_plots(&report.fidelity, &run_dir.join(PLOTS_DIR))
}
