//! Dual split (patients 80/20, time 2:1), controlled irregular sampling of
//! the training observation windows, and the per-visit input encoding.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, DatasetId, FeatureSchema, Normalizer, PatientTrajectory};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub observation_length: usize,
    pub prediction_length: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub const TRAIN_FRACTION: f64 = 0.8;

    /// 40/20 months for ART, 32/16 hours for hypotension.
    pub fn preset(dataset: DatasetId, seed: u64) -> Result<Self> {
        let (obs, pred) = match dataset {
            DatasetId::ArtHiv => (40, 20),
            DatasetId::Hypotension => (32, 16),
            DatasetId::Custom => {
                return Err(Error::config(
                    "split",
                    "custom datasets need explicit observation/prediction lengths",
                ))
            }
        };
        Ok(SplitSpec {
            train_fraction: Self::TRAIN_FRACTION,
            observation_length: obs,
            prediction_length: pred,
            seed,
        })
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("split.train_fraction", "must lie in (0, 1)"));
        }
        if self.observation_length == 0 || self.prediction_length == 0 {
            return Err(Error::config(
                "split.observation_length",
                "observation and prediction windows must be nonempty",
            ));
        }
        if self.observation_length + self.prediction_length != schema.sequence_length {
            return Err(Error::config(
                "split.observation_length",
                format!(
                    "{} + {} != sequence length {}",
                    self.observation_length, self.prediction_length, schema.sequence_length
                ),
            ));
        }
        Ok(())
    }
}

/// Patient partition plus the temporal windows (1-based, inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub observation_length: usize,
    pub prediction_length: usize,
}

impl SplitResult {
    pub fn observation_window(&self) -> (usize, usize) {
        (1, self.observation_length)
    }

    pub fn prediction_window(&self) -> (usize, usize) {
        (
            self.observation_length + 1,
            self.observation_length + self.prediction_length,
        )
    }

    pub fn train_ids<'a>(&self, cohort: &'a Cohort) -> Vec<&'a str> {
        self.train.iter().map(|&i| cohort.patients[i].patient_id.as_str()).collect()
    }

    pub fn test_ids<'a>(&self, cohort: &'a Cohort) -> Vec<&'a str> {
        self.test.iter().map(|&i| cohort.patients[i].patient_id.as_str()).collect()
    }
}

pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction + 1e-9).floor() as usize
}

/// Seeded permutation of patient indices; the first `floor(0.8 N)` train.
pub fn dual_split(cohort: &Cohort, spec: &SplitSpec) -> Result<SplitResult> {
    if cohort.is_empty() {
        return Err(Error::contract("cannot split an empty cohort"));
    }
    spec.validate(&cohort.schema)?;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed));
    let n_train = train_count(cohort.len(), spec.train_fraction);
    let test = order.split_off(n_train);
    Ok(SplitResult {
        train: order,
        test,
        observation_length: spec.observation_length,
        prediction_length: spec.prediction_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrregularitySpec {
    pub g_max: u32,
    #[serde(default)]
    pub resample_per_epoch: bool,
    pub seed: u64,
}

impl IrregularitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.g_max == 0 {
            return Err(Error::config("irregularity.g_max", "must be at least 1"));
        }
        Ok(())
    }

    /// Moderate and severe presets: 10/35 months, 8/28 hours.
    pub fn presets(dataset: DatasetId) -> Result<[u32; 2]> {
        match dataset {
            DatasetId::ArtHiv => Ok([10, 35]),
            DatasetId::Hypotension => Ok([8, 28]),
            DatasetId::Custom => Err(Error::config("irregularity", "no preset for custom data")),
        }
    }

    /// Gap stream for one patient. With per-epoch resampling the stream is
    /// also keyed by the epoch.
    pub fn patient_stream(&self, patient: usize, epoch: usize) -> rng::Stream {
        let seed = if self.resample_per_epoch {
            rng::derive_seed(self.seed, &format!("epoch-{epoch}"))
        } else {
            self.seed
        };
        rng::substream(seed, patient as u64)
    }
}

/// Source of integer gaps, uniform on `1..=g_max`.
pub trait GapSource {
    fn draw_gap(&mut self, g_max: u32) -> u32;
}

impl<R: Rng> GapSource for R {
    fn draw_gap(&mut self, g_max: u32) -> u32 {
        self.random_range(1..=g_max)
    }
}

/// Retained visits (1-based steps) and the gap preceding each one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitIndexSet {
    pub retained: Vec<usize>,
    pub delta_t: Vec<usize>,
}

impl VisitIndexSet {
    /// Every step of a window of the given length.
    pub fn complete(length: usize) -> Self {
        let retained: Vec<usize> = (1..=length).collect();
        let delta_t = compute_delta_t(&retained).expect("consecutive steps are increasing");
        VisitIndexSet { retained, delta_t }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.retained.iter().enumerate().all(|(i, &s)| s == i + 1)
    }
}

/// Starts at step 1 and keeps adding uniform gaps while the next visit stays
/// inside the window.
pub fn sample_gaps<S: GapSource + ?Sized>(
    observation_length: usize,
    spec: &IrregularitySpec,
    stream: &mut S,
) -> Result<VisitIndexSet> {
    if observation_length == 0 {
        return Err(Error::contract("observation window must be nonempty"));
    }
    spec.validate()?;
    let mut retained = vec![1];
    let mut delta_t = vec![0];
    let mut t = 1;
    loop {
        let g = stream.draw_gap(spec.g_max) as usize;
        debug_assert!((1..=spec.g_max as usize).contains(&g));
        if t + g > observation_length {
            break;
        }
        t += g;
        retained.push(t);
        delta_t.push(g);
    }
    Ok(VisitIndexSet { retained, delta_t })
}

pub fn compute_delta_t(retained: &[usize]) -> Result<Vec<usize>> {
    match retained.first() {
        None => return Err(Error::contract("no retained visits")),
        Some(&f) if f != 1 => {
            return Err(Error::contract(format!("first retained visit is {f}, expected 1")))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(retained.len());
    out.push(0);
    for w in retained.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::contract(format!(
                "retained visits not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        out.push(w[1] - w[0]);
    }
    Ok(out)
}

/// One encoded visit: z-scored numerics, one-hot blocks, `dt / g_max`.
pub fn encode_step(
    numeric: &[f64],
    categorical: &[usize],
    dt: usize,
    schema: &FeatureSchema,
    normalizer: &Normalizer,
    g_max: u32,
) -> Result<Vec<f64>> {
    if normalizer.len() != schema.n_numeric() {
        return Err(Error::contract(format!(
            "normalizer fitted for {} numeric features, schema has {}",
            normalizer.len(),
            schema.n_numeric()
        )));
    }
    let mut row = Vec::with_capacity(schema.encoded_dim());
    for (f, &x) in numeric.iter().enumerate() {
        row.push(normalizer.apply(x, f)?);
    }
    for (&lvl, k) in categorical.iter().zip(schema.level_counts()) {
        row.extend((0..k).map(|j| if j == lvl { 1.0 } else { 0.0 }));
    }
    row.push(dt as f64 / g_max as f64);
    Ok(row)
}

pub fn encode_visits(
    trajectory: &PatientTrajectory,
    visits: &VisitIndexSet,
    schema: &FeatureSchema,
    normalizer: &Normalizer,
    spec: &IrregularitySpec,
) -> Result<Tensor> {
    spec.validate()?;
    if visits.is_empty() {
        return Err(Error::contract("no visits to encode"));
    }
    if visits.retained.len() != visits.delta_t.len() {
        return Err(Error::contract("retained and delta_t lengths differ"));
    }
    let d = schema.encoded_dim();
    let mut data = Vec::with_capacity(visits.len() * d);
    for (&step, &dt) in visits.retained.iter().zip(&visits.delta_t) {
        if step == 0 || step > trajectory.len() {
            return Err(Error::contract(format!("visit step {step} out of bounds")));
        }
        data.extend(encode_step(
            trajectory.numeric_row(step),
            trajectory.categorical_row(step),
            dt,
            schema,
            normalizer,
            spec.g_max,
        )?);
    }
    Tensor::matrix(visits.len(), d, data)
}

/// Evaluation-side encoding: every step of `1..=length`, no subsampling.
/// `dt_scale` is the training `g_max`, which fixes the Δt normalisation the
/// model saw.
pub fn encode_complete_window(
    trajectory: &PatientTrajectory,
    length: usize,
    schema: &FeatureSchema,
    normalizer: &Normalizer,
    dt_scale: u32,
) -> Result<Tensor> {
    let visits = VisitIndexSet::complete(length);
    debug_assert!(visits.is_complete());
    let spec = IrregularitySpec {
        g_max: dt_scale,
        resample_per_epoch: false,
        seed: 0,
    };
    encode_visits(trajectory, &visits, schema, normalizer, &spec)
}

/// Inverse of [`encode_step`] for the feature channels: de-normalised
/// numerics and the argmax of each one-hot block.
pub fn decode_step(row: &[f64], schema: &FeatureSchema, normalizer: &Normalizer) -> Result<(Vec<f64>, Vec<usize>)> {
    if row.len() != schema.encoded_dim() {
        return Err(Error::shape(format!(
            "encoded row has {} entries, schema needs {}",
            row.len(),
            schema.encoded_dim()
        )));
    }
    let n = schema.n_numeric();
    let numeric = (0..n)
        .map(|f| normalizer.invert(row[f], f))
        .collect::<Result<Vec<_>>>()?;
    let mut offset = n;
    let mut categorical = Vec::with_capacity(schema.n_categorical());
    for k in schema.level_counts() {
        categorical.push(argmax(&row[offset..offset + k]));
        offset += k;
    }
    Ok((numeric, categorical))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{fit_normalizer, generate_synthetic_cohort, GeneratorSpec};

    struct Stub(std::vec::IntoIter<u32>);

    impl GapSource for Stub {
        fn draw_gap(&mut self, _g_max: u32) -> u32 {
            self.0.next().expect("stub exhausted")
        }
    }

    fn irr(g_max: u32) -> IrregularitySpec {
        IrregularitySpec {
            g_max,
            resample_per_epoch: false,
            seed: 3,
        }
    }

    #[test]
    fn complete_when_g_max_is_one() {
        let v = sample_gaps(40, &irr(1), &mut rng::stream(1)).unwrap();
        assert_eq!(v.retained, (1..=40).collect::<Vec<_>>());
        assert!(v.is_complete());
    }

    #[test]
    fn stub_stream_enumeration() {
        let mut stub = Stub(vec![2, 2, 2].into_iter());
        let v = sample_gaps(5, &irr(2), &mut stub).unwrap();
        assert_eq!(v.retained, [1, 3, 5]);
        assert_eq!(v.delta_t, [0, 2, 2]);
    }

    #[test]
    fn severe_gaps_stay_in_bounds() {
        let spec = irr(35);
        for seed in 0..200 {
            let v = sample_gaps(40, &spec, &mut rng::stream(seed)).unwrap();
            assert_eq!(v.retained[0], 1);
            assert!(v.len() >= 2 && v.len() <= 40);
            assert!(v.delta_t[1..].iter().all(|&g| (1..=35).contains(&g)));
            assert!(*v.retained.last().unwrap() <= 40);
        }
    }

    #[test]
    fn delta_t_examples() {
        assert_eq!(compute_delta_t(&[1, 2, 3]).unwrap(), [0, 1, 1]);
        assert_eq!(compute_delta_t(&[1, 3, 5]).unwrap(), [0, 2, 2]);
        assert_eq!(compute_delta_t(&[1]).unwrap(), [0]);
        assert!(compute_delta_t(&[1, 3, 3]).is_err());
        assert!(compute_delta_t(&[2, 3]).is_err());
    }

    #[test]
    fn art_split_arithmetic() {
        assert_eq!(train_count(8916, 0.8), 7132);
        assert_eq!(8916 - train_count(8916, 0.8), 1784);
        let s = SplitSpec::preset(DatasetId::ArtHiv, 0).unwrap();
        assert_eq!((s.observation_length, s.prediction_length), (40, 20));
        let s = SplitSpec::preset(DatasetId::Hypotension, 0).unwrap();
        assert_eq!((s.observation_length, s.prediction_length), (32, 16));
    }

    #[test]
    fn split_is_deterministic_and_rejects_bad_lengths() {
        let cohort = generate_synthetic_cohort(&GeneratorSpec::calibrated(DatasetId::ArtHiv, 25).unwrap(), 1).unwrap();
        let spec = SplitSpec::preset(DatasetId::ArtHiv, 5).unwrap();
        let a = dual_split(&cohort, &spec).unwrap();
        assert_eq!(a, dual_split(&cohort, &spec).unwrap());
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.prediction_window(), (41, 60));
        let bad = SplitSpec { observation_length: 41, ..spec };
        assert!(matches!(dual_split(&cohort, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn encoding_dimensions_and_inversion() {
        let cohort = generate_synthetic_cohort(&GeneratorSpec::calibrated(DatasetId::ArtHiv, 6).unwrap(), 2).unwrap();
        let schema = &cohort.schema;
        let norm = fit_normalizer(&cohort, &[0, 1, 2, 3], 1, 40).unwrap();
        let t = &cohort.patients[5];
        let visits = VisitIndexSet::complete(40);
        let enc = encode_visits(t, &visits, schema, &norm, &irr(1)).unwrap();
        assert_eq!(enc.shape(), &[40, 19]);
        assert_eq!(enc.get(0, 18), 0.0);
        assert!((1..40).all(|r| enc.get(r, 18) == 1.0));
        for (r, &step) in visits.retained.iter().enumerate() {
            let (num, cat) = decode_step(enc.row(r), schema, &norm).unwrap();
            assert_eq!(cat, t.categorical_row(step));
            for (a, b) in num.iter().zip(t.numeric_row(step)) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encoder_rejects_mismatched_normalizer() {
        let cohort = generate_synthetic_cohort(&GeneratorSpec::calibrated(DatasetId::ArtHiv, 3).unwrap(), 2).unwrap();
        let mut norm = fit_normalizer(&cohort, &[0, 1], 1, 40).unwrap();
        norm.features.pop();
        let r = encode_visits(&cohort.patients[0], &VisitIndexSet::complete(3), &cohort.schema, &norm, &irr(1));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
