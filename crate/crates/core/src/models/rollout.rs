use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Arch, BatchPrediction, Model};
use crate::cohort::{FeatureSchema, WindowColumns};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampling::argmax;
use crate::tensor::{softmax, Graph, Tensor};

/// How a step prediction becomes a concrete visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decoding {
    /// Numeric head mean and most likely level.
    Argmax,
    /// Numeric mean plus Gaussian noise at the calibrated residual spread,
    /// levels drawn from the softmax. Sequence `b` of a batch uses substream
    /// `b` of `seed`.
    Sample { seed: u64 },
}

/// One synthesized prediction window in schema units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthesizedWindow {
    pub numeric: Vec<Vec<f64>>,
    pub categorical: Vec<Vec<usize>>,
}

impl SynthesizedWindow {
    pub fn len(&self) -> usize {
        self.numeric.len().max(self.categorical.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append_to(&self, cols: &mut WindowColumns) {
        for t in 0..self.len() {
            let num = self.numeric.get(t).map(Vec::as_slice).unwrap_or(&[]);
            let cat = self.categorical.get(t).map(Vec::as_slice).unwrap_or(&[]);
            cols.push_step(num, cat);
        }
    }
}

/// Rolls one patient forward `horizon` steps from its encoded observation
/// window.
pub fn rollout(
    model: &Model,
    schema: &FeatureSchema,
    observation: &Tensor,
    horizon: usize,
    decoding: Decoding,
) -> Result<SynthesizedWindow> {
    Ok(rollout_batch(model, schema, std::slice::from_ref(observation), horizon, decoding)?.remove(0))
}

/// Autoregressive generation for equal-length encoded observation windows.
/// Every generated step is re-encoded with Δt = 1 and fed back.
pub fn rollout_batch(
    model: &Model,
    schema: &FeatureSchema,
    observations: &[Tensor],
    horizon: usize,
    decoding: Decoding,
) -> Result<Vec<SynthesizedWindow>> {
    let cal = &model.calibration;
    let normalizer = cal
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::State("model has no fitted normaliser; train it first".into()))?;
    if schema.n_numeric() != model.layout.n_numeric || schema.level_counts() != model.layout.level_counts {
        return Err(Error::contract("schema does not match the model's output heads"));
    }
    if horizon == 0 {
        return Err(Error::contract("rollout horizon must be positive"));
    }
    if observations.is_empty() {
        return Ok(Vec::new());
    }
    let obs_len = observations[0].dims2()?.0;
    if observations.iter().any(|o| o.shape() != observations[0].shape()) {
        return Err(Error::shape("observation windows must share one shape"));
    }
    let d = model.config.input_dim;
    if observations[0].shape()[1] != d {
        return Err(Error::shape(format!(
            "observation width {}, model expects {d}",
            observations[0].shape()[1]
        )));
    }
    let step_dt = 1.0 / cal.dt_scale as f64;
    let mut decoder = Decoder {
        model,
        streams: (0..observations.len())
            .map(|b| match decoding {
                Decoding::Sample { seed } => Some(rng::substream(seed, b as u64)),
                Decoding::Argmax => None,
            })
            .collect(),
        step_dt,
    };
    let mut windows = vec![SynthesizedWindow::default(); observations.len()];

    match &model.arch {
        Arch::Lstm(p) => {
            let g = Graph::new();
            let vars = g.params(&model.params.tensors)?;
            let refs: Vec<&Tensor> = observations.iter().collect();
            let (mut h, mut c) = p.encode(&g, &vars, &model.config, &refs)?;
            // First decoder input: last observed visit, Δt to the first target.
            let mut x: Vec<f64> = Vec::with_capacity(observations.len() * d);
            for o in observations {
                let mut row = o.row(obs_len - 1).to_vec();
                row[d - 1] = step_dt;
                x.extend(row);
            }
            for _ in 0..horizon {
                let xv = g.constant_from(observations.len(), d, x)?;
                let (h2, c2, pred) = p.decode_step(&vars, xv, h, c)?;
                h = h2;
                c = c2;
                x = decoder.emit(&pred, &mut windows, normalizer)?;
            }
        }
        Arch::Ethos(p) => {
            let max = model.config.max_positions;
            if obs_len + horizon - 1 > max {
                return Err(Error::config(
                    "model.max_positions",
                    format!("rollout of {obs_len}+{horizon} steps exceeds {max} positions"),
                ));
            }
            let mut seqs: Vec<Vec<f64>> = observations.iter().map(|o| o.data().to_vec()).collect();
            for t in 0..horizon {
                let len = obs_len + t;
                let tensors = seqs
                    .iter()
                    .map(|s| Tensor::matrix(len, d, s.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = tensors.iter().collect();
                let g = Graph::new();
                let vars = g.params(&model.params.tensors)?;
                let (pred, _) = p.forward(&g, &vars, &model.config, &refs)?;
                let last: Vec<usize> = (0..seqs.len()).map(|b| b * len + len - 1).collect();
                let last_pred = BatchPrediction {
                    numeric: pred.numeric.map(|v| v.gather_rows(last.clone())).transpose()?,
                    logits: pred
                        .logits
                        .iter()
                        .map(|v| v.gather_rows(last.clone()))
                        .collect::<Result<_>>()?,
                };
                let next = decoder.emit(&last_pred, &mut windows, normalizer)?;
                for (s, row) in seqs.iter_mut().zip(next.chunks(d)) {
                    s.extend_from_slice(row);
                }
            }
        }
    }
    Ok(windows)
}

struct Decoder<'m> {
    model: &'m Model,
    streams: Vec<Option<rng::Stream>>,
    step_dt: f64,
}

impl Decoder<'_> {
    /// Turns one prediction row per sequence into a visit, appends it to
    /// the windows and returns the re-encoded rows for the next input.
    fn emit(
        &mut self,
        pred: &BatchPrediction<'_>,
        windows: &mut [SynthesizedWindow],
        normalizer: &crate::cohort::Normalizer,
    ) -> Result<Vec<f64>> {
        let layout = &self.model.layout;
        let noise = &self.model.calibration.noise_scale;
        let numeric = pred.numeric.map(|v| v.value());
        let logits: Vec<Tensor> = pred.logits.iter().map(|v| v.value()).collect();
        let d = self.model.config.input_dim;
        let mut next = Vec::with_capacity(windows.len() * d);
        for (b, window) in windows.iter_mut().enumerate() {
            let stream = &mut self.streams[b];
            let mut z = numeric.as_ref().map(|t| t.row(b).to_vec()).unwrap_or_default();
            if let Some(s) = stream.as_mut() {
                for (f, v) in z.iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(s);
                    *v += noise[f] * e;
                }
            }
            let values = z
                .iter()
                .enumerate()
                .map(|(f, &v)| normalizer.invert(v, f))
                .collect::<Result<Vec<_>>>()?;
            let mut levels = Vec::with_capacity(layout.level_counts.len());
            for l in &logits {
                let row = l.row(b);
                let lvl = match stream.as_mut() {
                    Some(s) => draw_level(row, s)?,
                    None => argmax(row),
                };
                levels.push(lvl);
            }
            next.extend_from_slice(&z);
            for (&lvl, &k) in levels.iter().zip(&layout.level_counts) {
                next.extend((0..k).map(|j| if j == lvl { 1.0 } else { 0.0 }));
            }
            next.push(self.step_dt);
            window.numeric.push(values);
            window.categorical.push(levels);
        }
        Ok(next)
    }
}

fn draw_level<R: Rng>(logits: &[f64], rng: &mut R) -> Result<usize> {
    let p = softmax(logits)?;
    let dist = WeightedIndex::new(&p).map_err(|e| Error::contract(format!("level weights: {e}")))?;
    Ok(dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{make_schema, FeatureStats, Normalizer};
    use crate::models::{ModelConfig, OutputLayout};

    fn fitted(kind: crate::models::ModelKind) -> (Model, FeatureSchema) {
        let schema = make_schema("hypotension").unwrap();
        let layout = OutputLayout::from_schema(&schema);
        let mut m = Model::new(ModelConfig::for_kind(kind, 12, 48, 2), layout).unwrap();
        m.calibration.dt_scale = 8;
        m.calibration.noise_scale = vec![0.5; 3];
        m.calibration.normalizer = Some(Normalizer {
            features: schema
                .numeric_features
                .iter()
                .map(|f| FeatureStats {
                    mean: 1.0,
                    std: 2.0,
                    log_scale: f.log_scale,
                })
                .collect(),
        });
        (m, schema)
    }

    fn observations(n: usize) -> Vec<Tensor> {
        let mut r = rng::stream(1);
        (0..n).map(|_| Tensor::uniform_init(32, 12, 1, &mut r)).collect()
    }

    #[test]
    fn rollout_shapes_and_levels() {
        for kind in [crate::models::ModelKind::LstmSeq2seq, crate::models::ModelKind::EthosLite] {
            let (m, schema) = fitted(kind);
            let obs = observations(3);
            let out = rollout_batch(&m, &schema, &obs, 16, Decoding::Argmax).unwrap();
            assert_eq!(out.len(), 3);
            for w in &out {
                assert_eq!(w.len(), 16);
                assert!(w.numeric.iter().flatten().all(|v| v.is_finite()));
                assert!(w.categorical.iter().all(|r| r.len() == 2 && r.iter().all(|&l| l < 4)));
                // Urine is log-scale, so its values stay positive.
                assert!(w.numeric.iter().all(|r| r[1] > 0.0));
            }
        }
    }

    #[test]
    fn batch_and_single_rollouts_agree() {
        for kind in [crate::models::ModelKind::LstmSeq2seq, crate::models::ModelKind::EthosLite] {
            let (m, schema) = fitted(kind);
            let obs = observations(2);
            let batch = rollout_batch(&m, &schema, &obs, 5, Decoding::Sample { seed: 9 }).unwrap();
            let single = rollout(&m, &schema, &obs[0], 5, Decoding::Sample { seed: 9 }).unwrap();
            for (a, b) in batch[0].numeric.iter().flatten().zip(single.numeric.iter().flatten()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(batch[0].categorical, single.categorical);
        }
    }

    #[test]
    fn sampled_decoding_is_seeded() {
        let (m, schema) = fitted(crate::models::ModelKind::LstmSeq2seq);
        let obs = observations(2);
        let a = rollout_batch(&m, &schema, &obs, 6, Decoding::Sample { seed: 3 }).unwrap();
        let b = rollout_batch(&m, &schema, &obs, 6, Decoding::Sample { seed: 3 }).unwrap();
        let c = rollout_batch(&m, &schema, &obs, 6, Decoding::Sample { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn untrained_model_cannot_roll_out() {
        let schema = make_schema("hypotension").unwrap();
        let m = Model::new(ModelConfig::lstm(12, 48, 0), OutputLayout::from_schema(&schema)).unwrap();
        let err = rollout(&m, &schema, &Tensor::zeros(vec![32, 12]), 4, Decoding::Argmax).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_horizon_is_a_contract_error() {
        let (m, schema) = fitted(crate::models::ModelKind::EthosLite);
        let err = rollout(&m, &schema, &observations(1)[0], 0, Decoding::Argmax).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
