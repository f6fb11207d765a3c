use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    /// Statistics are taken on `ln(x)` when set.
    pub log_scale: bool,
}

/// Per-numeric-feature z-scoring. Log-scale features are standardised on the
/// log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: Vec<FeatureStats>,
}

/// Fits on steps `first..=last` of the listed patients only.
pub fn fit_normalizer(
    cohort: &Cohort,
    patients: &[usize],
    first: usize,
    last: usize,
) -> Result<Normalizer> {
    let schema = &cohort.schema;
    if first == 0 || first > last || last > schema.sequence_length {
        return Err(Error::contract(format!(
            "window {first}..={last} outside 1..={}",
            schema.sequence_length
        )));
    }
    if patients.is_empty() {
        return Err(Error::contract("no patients to fit the normalizer on"));
    }
    let mut features = Vec::with_capacity(schema.n_numeric());
    for (f, feat) in schema.numeric_features.iter().enumerate() {
        let values: Vec<f64> = patients
            .iter()
            .flat_map(|&p| {
                let t = &cohort.patients[p];
                (first..=last).map(move |s| t.numeric(s, f))
            })
            .map(|x| if feat.log_scale { x.ln() } else { x })
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateFeature(feat.name.clone()));
        }
        features.push(FeatureStats {
            mean,
            std,
            log_scale: feat.log_scale,
        });
    }
    Ok(Normalizer { features })
}

impl Normalizer {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn stats(&self, feature: usize) -> Result<&FeatureStats> {
        self.features.get(feature).ok_or_else(|| {
            Error::contract(format!(
                "normalizer has no statistics for numeric feature {feature}"
            ))
        })
    }

    pub fn apply(&self, value: f64, feature: usize) -> Result<f64> {
        let s = self.stats(feature)?;
        let x = if s.log_scale { value.ln() } else { value };
        Ok((x - s.mean) / s.std)
    }

    pub fn invert(&self, z: f64, feature: usize) -> Result<f64> {
        let s = self.stats(feature)?;
        let x = z * s.std + s.mean;
        Ok(if s.log_scale { x.exp() } else { x })
    }
}

/// Applies a fitted normalizer; free-function form of [`Normalizer::apply`].
pub fn apply_normalizer(normalizer: &Normalizer, value: f64, feature: usize) -> Result<f64> {
    normalizer.apply(value, feature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{make_schema, Cohort, DatasetId, PatientTrajectory};

    fn cohort_of(values: &[&[f64]]) -> Cohort {
        let mut schema = make_schema("hypotension").unwrap();
        schema.dataset_id = DatasetId::Custom;
        schema.numeric_features.truncate(1);
        schema.categorical_features.clear();
        schema.sequence_length = values[0].len();
        let patients = values
            .iter()
            .enumerate()
            .map(|(i, v)| PatientTrajectory::new(format!("p{i}"), &schema, v.to_vec(), vec![]).unwrap())
            .collect();
        Cohort::new(schema, patients).unwrap()
    }

    #[test]
    fn zero_one_maps_to_plus_minus_one() {
        let c = cohort_of(&[&[0.0, 2.0]]);
        let n = fit_normalizer(&c, &[0], 1, 2).unwrap();
        assert_eq!(n.apply(0.0, 0).unwrap(), -1.0);
        assert_eq!(n.apply(2.0, 0).unwrap(), 1.0);
    }

    #[test]
    fn shifted_mean_maps_to_zero() {
        let c = cohort_of(&[&[1000.0, 1002.0, 1004.0]]);
        let n = fit_normalizer(&c, &[0], 1, 3).unwrap();
        assert_eq!(n.apply(1002.0, 0).unwrap(), 0.0);
    }

    #[test]
    fn fit_ignores_other_patients_and_steps() {
        let c = cohort_of(&[&[0.0, 2.0, 99.0], &[500.0, 600.0, 700.0]]);
        let n = fit_normalizer(&c, &[0], 1, 2).unwrap();
        assert_eq!(n.features[0].mean, 1.0);
        assert_eq!(n.features[0].std, 1.0);
        assert_eq!(n.apply(41.0, 0).unwrap(), 40.0);
    }

    #[test]
    fn degenerate_feature() {
        let c = cohort_of(&[&[3.0, 3.0, 5.0]]);
        assert!(matches!(
            fit_normalizer(&c, &[0], 1, 2),
            Err(Error::DegenerateFeature(_))
        ));
        assert!(fit_normalizer(&c, &[0], 0, 2).is_err());
        assert!(fit_normalizer(&c, &[0], 1, 4).is_err());
    }

    #[test]
    fn log_scale_round_trip() {
        let c = cohort_of(&[&[10.0, 1000.0]]);
        let mut n = fit_normalizer(&c, &[0], 1, 2).unwrap();
        n.features[0].log_scale = true;
        n.features[0].mean = 10f64.ln();
        let z = n.apply(778.27, 0).unwrap();
        assert!((n.invert(z, 0).unwrap() - 778.27).abs() < 1e-9);
    }
}
