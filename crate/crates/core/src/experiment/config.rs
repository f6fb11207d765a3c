use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{DatasetId, FeatureSchema, GeneratorSpec, NumericParams};
use crate::error::{Error, Result};
use crate::models::{Decoding, ModelConfig, ModelKind};
use crate::rng::derive_seed;
use crate::sampling::{IrregularitySpec, SplitSpec};
use crate::training::TrainConfig;

/// Stage labels used to fan the master seed out.
pub mod labels {
    pub const COHORT: &str = "cohort";
    pub const SPLIT: &str = "split";
    pub const GAPS: &str = "gaps";
    pub const TRAIN: &str = "train";
    pub const MODEL: &str = "model";
    pub const ROLLOUT: &str = "rollout";
}

/// Experiment description as read from JSON. Every seed is optional and
/// derived from `master_seed` when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub source: SourceConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub split: SplitSection,
    pub irregularity: IrregularitySection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub decoding: DecodingSection,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

/// Overrides on the calibrated generator of a shipped dataset. A custom
/// dataset must give its schema and every generator parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_patients: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_params: Option<Vec<NumericParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical_cutpoints: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<FeatureSchema>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrregularitySection {
    pub g_max: u32,
    #[serde(default)]
    pub resample_per_epoch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_loss_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categorical_loss_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    #[default]
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    #[serde(default)]
    pub mode: DecodingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The seed each stage actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub master: u64,
    /// Absent for CSV cohorts.
    pub cohort: Option<u64>,
    pub split: u64,
    pub gaps: u64,
    pub train: u64,
    pub model: u64,
    /// Absent for argmax decoding.
    pub rollout: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CohortPlan {
    Synthetic { spec: GeneratorSpec, seed: u64 },
    Csv { path: PathBuf, schema: FeatureSchema },
}

/// A validated config with every default and seed filled in and every
/// path resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedExperiment {
    pub dataset: DatasetId,
    pub schema: FeatureSchema,
    pub cohort: CohortPlan,
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub irregularity: IrregularitySpec,
    pub training: TrainConfig,
    pub decoding: Decoding,
    pub seeds: StageSeeds,
    pub output_dir: PathBuf,
}

/// Rewrites a module-level field path (`generator.rho`, `schema.x`) to its
/// location in the experiment config.
fn relocate(err: Error, prefix: &str, strip: &str) -> Error {
    match err {
        Error::Config { field, message } => {
            let rest = field.strip_prefix(strip).unwrap_or(&field);
            let rest = rest.trim_start_matches('.');
            let field = if rest.is_empty() {
                prefix.to_string()
            } else {
                format!("{prefix}.{rest}")
            };
            Error::Config { field, message }
        }
        other => other,
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses config JSON. Syntax and type errors carry the JSON path of the
/// offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_json(text)
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "config".to_string() } else { path };
        Error::config(field, e.into_inner().to_string())
    })
}

/// Reads and parses a config file. An unreadable file is a validation
/// failure, like any other bad reference.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Input of the `gen` command: a dataset plus generator overrides. With the
/// same master seed it reproduces the cohort of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub dataset: DatasetId,
    #[serde(default)]
    pub synthetic: SyntheticSource,
    #[serde(default)]
    pub master_seed: u64,
}

impl GenerateSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("spec", format!("cannot read {}: {e}", path.display())))?;
        parse_json(&text)
    }

    pub fn resolve(&self) -> Result<(GeneratorSpec, u64)> {
        self.synthetic
            .resolve(self.dataset, self.master_seed)
            .map_err(|e| relocate(e, "synthetic", "source.synthetic"))
    }
}

impl SyntheticSource {
    /// Generator spec and cohort seed for `dataset`.
    pub fn resolve(&self, dataset: DatasetId, master_seed: u64) -> Result<(GeneratorSpec, u64)> {
        let at = |f: &str| format!("source.synthetic.{f}");
        let spec = match (dataset, &self.schema) {
            (DatasetId::Custom, None) => {
                return Err(Error::config(at("schema"), "a custom dataset needs a schema"));
            }
            (DatasetId::Custom, Some(schema)) => {
                if schema.dataset_id != DatasetId::Custom {
                    return Err(Error::config(at("schema.dataset_id"), "must be `custom`"));
                }
                let missing = |f: &str| Error::config(at(f), "required for a custom dataset");
                GeneratorSpec {
                    schema: schema.clone(),
                    n_patients: self.n_patients.ok_or_else(|| missing("n_patients"))?,
                    rho: self.rho.ok_or_else(|| missing("rho"))?,
                    loadings: self.loadings.clone().ok_or_else(|| missing("loadings"))?,
                    numeric_params: self.numeric_params.clone().ok_or_else(|| missing("numeric_params"))?,
                    categorical_cutpoints: self
                        .categorical_cutpoints
                        .clone()
                        .ok_or_else(|| missing("categorical_cutpoints"))?,
                }
            }
            (_, Some(_)) => {
                return Err(Error::config(at("schema"), "only custom datasets carry a schema"));
            }
            (shipped, None) => {
                let mut spec = GeneratorSpec::calibrated(shipped, default_patients(shipped))?;
                if let Some(n) = self.n_patients {
                    spec.n_patients = n;
                }
                if let Some(r) = self.rho {
                    spec.rho = r;
                }
                if let Some(l) = &self.loadings {
                    spec.loadings = l.clone();
                }
                if let Some(p) = &self.numeric_params {
                    spec.numeric_params = p.clone();
                }
                if let Some(c) = &self.categorical_cutpoints {
                    spec.categorical_cutpoints = c.clone();
                }
                spec
            }
        };
        spec.validate().map_err(|e| match e {
            Error::Config { ref field, .. } if field.starts_with("schema") => relocate(e, &at("schema"), "schema"),
            e => relocate(e, "source.synthetic", "generator"),
        })?;
        let seed = self.seed.unwrap_or_else(|| derive_seed(master_seed, labels::COHORT));
        Ok((spec, seed))
    }
}

/// Full-size cohort for each shipped dataset, used when no size is given.
pub fn default_patients(dataset: DatasetId) -> usize {
    match dataset {
        DatasetId::ArtHiv => 8916,
        DatasetId::Hypotension => 3910,
        DatasetId::Custom => 0,
    }
}

impl ExperimentConfig {
    /// Validates every section and fills in defaults. Nothing is read or
    /// written except an existence check on referenced files. `base_dir`
    /// anchors relative paths.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedExperiment> {
        let master = self.master_seed;
        let (schema, cohort, cohort_seed) = match &self.source {
            SourceConfig::Synthetic(s) => {
                let (spec, seed) = s.resolve(self.dataset, master)?;
                (spec.schema.clone(), CohortPlan::Synthetic { spec, seed }, Some(seed))
            }
            SourceConfig::Csv(c) => {
                let schema = match (self.dataset, &c.schema) {
                    (DatasetId::Custom, None) => {
                        return Err(Error::config("source.csv.schema", "a custom dataset needs a schema"));
                    }
                    (DatasetId::Custom, Some(s)) => s.clone(),
                    (_, Some(_)) => {
                        return Err(Error::config("source.csv.schema", "only custom datasets carry a schema"));
                    }
                    (shipped, None) => crate::cohort::make_schema(shipped.as_str())?,
                };
                schema
                    .validate()
                    .map_err(|e| relocate(e, "source.csv.schema", "schema"))?;
                let path = resolve_path(base_dir, &c.path);
                if !path.is_file() {
                    return Err(Error::config(
                        "source.csv.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
                (schema.clone(), CohortPlan::Csv { path, schema }, None)
            }
        };

        let split_seed = self.split.seed.unwrap_or_else(|| derive_seed(master, labels::SPLIT));
        let mut split = match self.dataset {
            DatasetId::Custom => SplitSpec {
                train_fraction: SplitSpec::TRAIN_FRACTION,
                observation_length: self.split.observation_length.ok_or_else(|| {
                    Error::config("split.observation_length", "required for a custom dataset")
                })?,
                prediction_length: self.split.prediction_length.ok_or_else(|| {
                    Error::config("split.prediction_length", "required for a custom dataset")
                })?,
                seed: split_seed,
            },
            shipped => SplitSpec::preset(shipped, split_seed)?,
        };
        if let Some(f) = self.split.train_fraction {
            split.train_fraction = f;
        }
        if let Some(o) = self.split.observation_length {
            split.observation_length = o;
        }
        if let Some(p) = self.split.prediction_length {
            split.prediction_length = p;
        }
        split.validate(&schema)?;

        let irregularity = IrregularitySpec {
            g_max: self.irregularity.g_max,
            resample_per_epoch: self.irregularity.resample_per_epoch,
            seed: self.irregularity.seed.unwrap_or_else(|| derive_seed(master, labels::GAPS)),
        };
        irregularity.validate()?;
        if irregularity.g_max as usize > split.observation_length {
            return Err(Error::config(
                "irregularity.g_max",
                format!("exceeds the observation window of {} steps", split.observation_length),
            ));
        }

        let t = &self.training;
        let d = TrainConfig::default();
        let training = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            lr: t.lr.unwrap_or(d.lr),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            numeric_loss_weight: t.numeric_loss_weight.unwrap_or(d.numeric_loss_weight),
            categorical_loss_weight: t.categorical_loss_weight.unwrap_or(d.categorical_loss_weight),
            clip_norm: t.clip_norm,
            seed: t.seed.unwrap_or_else(|| derive_seed(master, labels::TRAIN)),
        };
        training.validate()?;

        let model_seed = self.model.seed.unwrap_or_else(|| derive_seed(master, labels::MODEL));
        let model = ModelConfig::for_kind(
            self.model.kind,
            schema.encoded_dim(),
            split.observation_length + split.prediction_length,
            model_seed,
        );
        model.validate()?;

        let (decoding, rollout_seed) = match self.decoding.mode {
            DecodingMode::Argmax => {
                if self.decoding.seed.is_some() {
                    return Err(Error::config("decoding.seed", "only sampled decoding takes a seed"));
                }
                (Decoding::Argmax, None)
            }
            DecodingMode::Sample => {
                let seed = self.decoding.seed.unwrap_or_else(|| derive_seed(master, labels::ROLLOUT));
                (Decoding::Sample { seed }, Some(seed))
            }
        };

        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }

        Ok(ResolvedExperiment {
            dataset: self.dataset,
            schema,
            cohort,
            model,
            split,
            irregularity,
            training,
            decoding,
            seeds: StageSeeds {
                master,
                cohort: cohort_seed,
                split: split_seed,
                gaps: irregularity.seed,
                train: training.seed,
                model: model_seed,
                rollout: rollout_seed,
            },
            output_dir: resolve_path(base_dir, &self.output_dir),
        })
    }

    /// The config as echoed into reports: everything except the output
    /// directory, so runs written to different places compare equal.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "dataset": "art_hiv",
            "source": {"synthetic": {"n_patients": 40}},
            "model": {"kind": "lstm_seq2seq"},
            "irregularity": {"g_max": 10},
            "output_dir": "out",
            "master_seed": 11
        })
    }

    fn resolve(v: &serde_json::Value) -> Result<ResolvedExperiment> {
        parse_config(&v.to_string())?.resolve(Path::new("/tmp"))
    }

    fn field_of(r: Result<ResolvedExperiment>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_follow_the_presets() {
        let r = resolve(&base()).unwrap();
        assert_eq!(r.split.observation_length, 40);
        assert_eq!(r.split.prediction_length, 20);
        assert_eq!(r.training.epochs, 10);
        assert_eq!(r.model.max_positions, 60);
        assert_eq!(r.model.input_dim, 19);
        assert_eq!(r.decoding, Decoding::Argmax);
        assert_eq!(r.seeds.split, derive_seed(11, "split"));
        assert_eq!(r.seeds.gaps, derive_seed(11, "gaps"));
        assert_eq!(r.output_dir, Path::new("/tmp/out"));
    }

    #[test]
    fn explicit_seeds_win() {
        let mut v = base();
        v["split"] = serde_json::json!({"seed": 3});
        v["decoding"] = serde_json::json!({"mode": "sample", "seed": 9});
        let r = resolve(&v).unwrap();
        assert_eq!(r.seeds.split, 3);
        assert_eq!(r.decoding, Decoding::Sample { seed: 9 });
    }

    #[test]
    fn errors_carry_field_paths() {
        let mut v = base();
        v["irregularity"]["g_max"] = 0.into();
        assert_eq!(field_of(resolve(&v)), "irregularity.g_max");

        let mut v = base();
        v["source"]["synthetic"]["rho"] = 1.5.into();
        assert_eq!(field_of(resolve(&v)), "source.synthetic.rho");

        let mut v = base();
        v["training"] = serde_json::json!({"lr": -1.0});
        assert_eq!(field_of(resolve(&v)), "training.lr");

        let mut v = base();
        v["model"]["kind"] = "gru".into();
        assert_eq!(field_of(resolve(&v)), "model.kind");

        let mut v = base();
        v["training"] = serde_json::json!({"epoch": 3});
        assert_eq!(field_of(resolve(&v)), "training.epoch");

        let mut v = base();
        v["source"] = serde_json::json!({"csv": {"path": "missing.csv"}});
        assert_eq!(field_of(resolve(&v)), "source.csv.path");

        let mut v = base();
        v["split"] = serde_json::json!({"observation_length": 30});
        assert_eq!(field_of(resolve(&v)), "split.observation_length");

        let mut v = base();
        v.as_object_mut().unwrap().remove("master_seed");
        assert_eq!(field_of(resolve(&v)), "config");
    }

    #[test]
    fn custom_dataset_needs_its_schema() {
        let mut v = base();
        v["dataset"] = "custom".into();
        assert_eq!(field_of(resolve(&v)), "source.synthetic.schema");
    }

    #[test]
    fn echo_drops_the_output_dir() {
        let cfg = parse_config(&base().to_string()).unwrap();
        let echo = cfg.echo();
        assert!(echo.get("output_dir").is_none());
        assert_eq!(echo["master_seed"], 11);
    }
}
