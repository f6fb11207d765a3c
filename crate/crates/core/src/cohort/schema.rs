use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    ArtHiv,
    Hypotension,
    Custom,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::ArtHiv => "art_hiv",
            DatasetId::Hypotension => "hypotension",
            DatasetId::Custom => "custom",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "art_hiv" => Ok(DatasetId::ArtHiv),
            "hypotension" => Ok(DatasetId::Hypotension),
            "custom" => Ok(DatasetId::Custom),
            other => Err(Error::config(
                "dataset",
                format!("unknown dataset `{other}` (expected art_hiv, hypotension or custom)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Month,
    Hour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericFeature {
    pub name: String,
    pub unit: String,
    #[serde(default)]
    pub log_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub dataset_id: DatasetId,
    pub numeric_features: Vec<NumericFeature>,
    pub categorical_features: Vec<CategoricalFeature>,
    pub sequence_length: usize,
    pub time_unit: TimeUnit,
}

fn numeric(name: &str, unit: &str, log_scale: bool) -> NumericFeature {
    NumericFeature {
        name: name.into(),
        unit: unit.into(),
        log_scale,
    }
}

fn categorical(name: &str, levels: &[&str]) -> CategoricalFeature {
    CategoricalFeature {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
    }
}

/// Fixed schema for a shipped dataset.
pub fn make_schema(dataset_id: &str) -> Result<FeatureSchema> {
    match dataset_id.parse::<DatasetId>()? {
        DatasetId::ArtHiv => Ok(FeatureSchema {
            dataset_id: DatasetId::ArtHiv,
            numeric_features: vec![
                numeric("Viral load", "copies/mL", true),
                numeric("CD4 count", "cells/µL", true),
            ],
            categorical_features: vec![
                categorical(
                    "Base Combo",
                    &[
                        "FTC + TDF",
                        "3TC + ABC",
                        "FTC + TAF",
                        "DRV + FTC + TDF",
                        "FTC + RTVB + TDF",
                        "Other",
                    ],
                ),
                categorical("Comp. INI", &["DTG", "RAL", "EVG", "Not applied"]),
                categorical(
                    "Extra PI",
                    &["DRV", "RTVB", "LPV", "RTV", "ATV", "Not applied"],
                ),
            ],
            sequence_length: 60,
            time_unit: TimeUnit::Month,
        }),
        DatasetId::Hypotension => Ok(FeatureSchema {
            dataset_id: DatasetId::Hypotension,
            numeric_features: vec![
                numeric("MAP", "mmHg", false),
                numeric("Urine", "mL", true),
                numeric("Lactate", "mmol/L", false),
            ],
            categorical_features: vec![
                categorical(
                    "Vasopressors",
                    &["0", "(0, 8.4)", "[8.4, 20.28)", ">=20.28"],
                ),
                categorical(
                    "Fluid Boluses",
                    &["[0, 250)", "[250, 500)", "[500, 1000)", ">=1000"],
                ),
            ],
            sequence_length: 48,
            time_unit: TimeUnit::Hour,
        }),
        DatasetId::Custom => Err(Error::config(
            "dataset",
            "custom datasets carry their own schema; there is no fixed one",
        )),
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 {
            return Err(Error::config("schema.sequence_length", "must be positive"));
        }
        if self.numeric_features.is_empty() && self.categorical_features.is_empty() {
            return Err(Error::config("schema", "no features"));
        }
        let mut names = HashSet::new();
        for name in self.feature_names() {
            if name.is_empty() {
                return Err(Error::config("schema", "empty feature name"));
            }
            if matches!(name, "patient_id" | "step") {
                return Err(Error::config(
                    "schema",
                    format!("feature name `{name}` collides with a CSV key column"),
                ));
            }
            if !names.insert(name) {
                return Err(Error::config(
                    "schema",
                    format!("duplicate feature name `{name}`"),
                ));
            }
        }
        for (i, f) in self.categorical_features.iter().enumerate() {
            if f.levels.is_empty() {
                return Err(Error::config(
                    format!("schema.categorical_features[{i}].levels"),
                    "at least one level is required",
                ));
            }
            let mut seen = HashSet::new();
            for l in &f.levels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::config(
                        format!("schema.categorical_features[{i}].levels"),
                        format!("duplicate level `{l}` in `{}`", f.name),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_features.len()
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical_features.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_numeric() + self.n_categorical()
    }

    /// Numeric features first, then categorical, each in declaration order.
    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.numeric_features
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.categorical_features.iter().map(|f| f.name.as_str()))
    }

    pub fn feature_kind(&self, index: usize) -> FeatureKind {
        if index < self.n_numeric() {
            FeatureKind::Numeric
        } else {
            FeatureKind::Categorical
        }
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.categorical_features
            .iter()
            .map(|f| f.levels.len())
            .collect()
    }

    /// Width of one encoded visit: z-scored numerics, one-hot blocks, and
    /// the Δt channel.
    pub fn encoded_dim(&self) -> usize {
        self.n_numeric() + self.level_counts().iter().sum::<usize>() + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn art_schema() {
        let s = make_schema("art_hiv").unwrap();
        assert_eq!(s.n_numeric(), 2);
        assert_eq!(s.n_categorical(), 3);
        assert_eq!(s.sequence_length, 60);
        assert_eq!(s.time_unit, TimeUnit::Month);
        assert_eq!(
            s.categorical_features[1].levels,
            ["DTG", "RAL", "EVG", "Not applied"]
        );
        assert_eq!(s.level_counts(), [6, 4, 6]);
        assert_eq!(s.encoded_dim(), 19);
        s.validate().unwrap();
    }

    #[test]
    fn hypotension_schema() {
        let s = make_schema("hypotension").unwrap();
        assert_eq!(s.n_numeric(), 3);
        assert_eq!(s.n_categorical(), 2);
        assert_eq!(s.sequence_length, 48);
        assert_eq!(s.time_unit, TimeUnit::Hour);
        assert_eq!(s.encoded_dim(), 12);
        s.validate().unwrap();
    }

    #[test]
    fn unknown_dataset_is_a_config_error() {
        assert!(matches!(make_schema("mimic"), Err(Error::Config { .. })));
    }

    #[test]
    fn duplicate_levels_rejected() {
        let mut s = make_schema("hypotension").unwrap();
        s.categorical_features[0].levels[1] = "0".into();
        assert!(s.validate().is_err());
        let mut s = make_schema("hypotension").unwrap();
        s.numeric_features[1].name = "MAP".into();
        assert!(s.validate().is_err());
    }
}
