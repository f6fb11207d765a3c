//! Reconstruction objective and the fixed training recipe over the
//! irregularly subsampled training observation windows.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{fit_normalizer, Cohort, Normalizer};
use crate::error::{Error, Result};
use crate::models::{BatchPrediction, Model, ModelConfig, ModelInput, ModelKind, OutputLayout, StepPrediction};
use crate::rng;
use crate::sampling::{encode_visits, sample_gaps, IrregularitySpec, SplitResult, VisitIndexSet};
use crate::tensor::{adam_step, cross_entropy_loss, mse_loss, AdamState, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub numeric_loss_weight: f64,
    pub categorical_loss_weight: f64,
    /// Global gradient-norm ceiling; off unless set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            numeric_loss_weight: 1.0,
            categorical_loss_weight: 1.0,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        for (field, w) in [
            ("training.numeric_loss_weight", self.numeric_loss_weight),
            ("training.categorical_loss_weight", self.categorical_loss_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        if self.numeric_loss_weight == 0.0 && self.categorical_loss_weight == 0.0 {
            return Err(Error::config("training.numeric_loss_weight", "both loss weights are zero"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("training.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            numeric: self.numeric_loss_weight,
            categorical: self.categorical_loss_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub numeric: f64,
    pub categorical: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            numeric: 1.0,
            categorical: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Reads of patient data made while fitting. Anything outside the training
/// patients' observation windows is counted separately and must stay zero.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub train_reads: u64,
    pub test_patient_reads: u64,
    pub prediction_window_reads: u64,
}

/// Access counter over (patient, step) reads.
#[derive(Debug, Clone)]
pub struct AccessMonitor {
    is_test: Vec<bool>,
    observation_length: usize,
    pub audit: LeakageAudit,
}

impl AccessMonitor {
    pub fn new(n_patients: usize, split: &SplitResult) -> Self {
        let mut is_test = vec![false; n_patients];
        for &p in &split.test {
            is_test[p] = true;
        }
        AccessMonitor {
            is_test,
            observation_length: split.observation_length,
            audit: LeakageAudit::default(),
        }
    }

    pub fn touch(&mut self, patient: usize, step: usize) {
        if self.is_test[patient] {
            self.audit.test_patient_reads += 1;
        } else if step > self.observation_length {
            self.audit.prediction_window_reads += 1;
        } else {
            self.audit.train_reads += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub epochs: Vec<EpochRecord>,
    pub adam_steps: u64,
    pub sequences: usize,
    /// Patients whose retained window had a single visit and so no target.
    pub skipped_sequences: usize,
    pub noise_scale: Vec<f64>,
    pub checksum: String,
    pub leakage: LeakageAudit,
    /// Kept out of the serialized report so it stays reproducible.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

/// Model input plus the encoded visits it should reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub kind: ModelKind,
    pub first: Tensor,
    pub second: Option<Tensor>,
    pub target: Tensor,
}

impl Example {
    pub fn input(&self) -> ModelInput<'_> {
        match &self.second {
            Some(dec) => ModelInput::Seq2Seq {
                encoder: &self.first,
                decoder: dec,
            },
            None => ModelInput::Causal { steps: &self.first },
        }
    }
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let d = t.shape()[1];
    Tensor::matrix(len, d, t.data()[start * d..(start + len) * d].to_vec())
}

/// Training pair for one encoded retained sequence of `k ≥ 2` visits.
///
/// Causal: inputs are visits `0..k-1` as encoded, targets are visits `1..k`.
///
/// Seq2seq: the first `⌈k/2⌉` visits feed the encoder unchanged. Decoder
/// input `j` is the previous visit with its Δt channel replaced by the gap
/// to target `j`.
pub fn make_example(kind: ModelKind, encoded: &Tensor, visits: &VisitIndexSet, dt_scale: u32) -> Result<Option<Example>> {
    let (k, d) = encoded.dims2()?;
    if visits.len() != k {
        return Err(Error::contract("visit set and encoding differ in length"));
    }
    if k < 2 {
        return Ok(None);
    }
    let lookahead = |src: Tensor, gaps: &[usize]| -> Tensor {
        let mut t = src;
        let data = t.data_mut();
        for (r, &g) in gaps.iter().enumerate() {
            data[r * d + d - 1] = g as f64 / dt_scale as f64;
        }
        t
    };
    Ok(Some(match kind {
        ModelKind::EthosLite => Example {
            kind,
            first: rows(encoded, 0, k - 1)?,
            second: None,
            target: rows(encoded, 1, k - 1)?,
        },
        ModelKind::LstmSeq2seq => {
            let e = k.div_ceil(2);
            Example {
                kind,
                first: rows(encoded, 0, e)?,
                second: Some(lookahead(rows(encoded, e - 1, k - e)?, &visits.delta_t[e..])),
                target: rows(encoded, e, k - e)?,
            }
        }
    }))
}

/// `w_n · MSE(numeric z-channels) + w_c · mean_f CE_f` over all target rows.
pub fn reconstruction_loss<'g>(
    pred: &BatchPrediction<'g>,
    targets: &Tensor,
    layout: &OutputLayout,
    weights: LossWeights,
) -> Result<Var<'g>> {
    let (n, d) = targets.dims2()?;
    if pred.rows() != n {
        return Err(Error::contract(format!(
            "{} predictions for {n} target steps",
            pred.rows()
        )));
    }
    if d != layout.encoded_dim() {
        return Err(Error::shape(format!("targets have width {d}, layout needs {}", layout.encoded_dim())));
    }
    let mut terms: Vec<Var<'g>> = Vec::new();
    if let Some(num) = pred.numeric {
        let graph_target = {
            let mut v = Vec::with_capacity(n * layout.n_numeric);
            for r in 0..n {
                v.extend_from_slice(&targets.row(r)[..layout.n_numeric]);
            }
            v
        };
        let t = num.graph().constant_from(n, layout.n_numeric, graph_target)?;
        terms.push(mse_loss(num, t)?.scale(weights.numeric)?);
    }
    if !pred.logits.is_empty() {
        let mut offset = layout.n_numeric;
        let mut ce: Option<Var<'g>> = None;
        for (logits, &k) in pred.logits.iter().zip(&layout.level_counts) {
            let labels: Vec<usize> = (0..n)
                .map(|r| crate::sampling::argmax(&targets.row(r)[offset..offset + k]))
                .collect();
            let l = cross_entropy_loss(*logits, &labels)?;
            ce = Some(match ce {
                Some(acc) => acc.add(l)?,
                None => l,
            });
            offset += k;
        }
        let mean_ce = ce.expect("at least one head").scale(1.0 / pred.logits.len() as f64)?;
        terms.push(mean_ce.scale(weights.categorical)?);
    }
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::contract("layout has no features"))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

/// Loss of already computed step predictions against encoded targets.
pub fn reconstruction_loss_value(
    preds: &[StepPrediction],
    targets: &Tensor,
    layout: &OutputLayout,
    weights: LossWeights,
) -> Result<f64> {
    let n = targets.dims2()?.0;
    if preds.len() != n {
        return Err(Error::contract(format!("{} predictions for {n} target steps", preds.len())));
    }
    let g = Graph::new();
    let numeric = if layout.n_numeric > 0 {
        let data: Vec<f64> = preds.iter().flat_map(|p| p.numeric.iter().copied()).collect();
        Some(g.constant_from(n, layout.n_numeric, data)?)
    } else {
        None
    };
    let logits = layout
        .level_counts
        .iter()
        .enumerate()
        .map(|(f, &k)| {
            let data: Vec<f64> = preds.iter().flat_map(|p| p.categorical_logits[f].iter().copied()).collect();
            g.constant_from(n, k, data)
        })
        .collect::<Result<Vec<_>>>()?;
    reconstruction_loss(&BatchPrediction { numeric, logits }, targets, layout, weights)?.scalar()
}

fn stack_targets(batch: &[&Example]) -> Result<Tensor> {
    let d = batch[0].target.shape()[1];
    let mut data = Vec::new();
    for e in batch {
        data.extend_from_slice(e.target.data());
    }
    Tensor::matrix(data.len() / d, d, data)
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_gradients(model: &Model, batch: &[&Example], weights: LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let vars = g.params(&model.params.tensors)?;
    let inputs: Vec<ModelInput<'_>> = batch.iter().map(|e| e.input()).collect();
    let pred = model.forward_batch(&g, &vars, &inputs)?;
    let loss = reconstruction_loss(&pred, &stack_targets(batch)?, &model.layout, weights)?;
    let value = loss.scalar()?;
    let grads = g.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

fn clip_gradients(params: &mut [Tensor], max_norm: f64) -> Result<()> {
    let norm = params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|v| v * s).collect();
                p.set_grad(scaled)?;
            }
        }
    }
    Ok(())
}

/// Builds this epoch's training examples from the training patients'
/// observation windows, recording every read with `monitor`.
fn epoch_examples(
    kind: ModelKind,
    cohort: &Cohort,
    split: &SplitResult,
    irregularity: &IrregularitySpec,
    normalizer: &Normalizer,
    epoch: usize,
    monitor: &mut AccessMonitor,
) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(split.train.len());
    let mut skipped = 0;
    for &p in &split.train {
        let visits = sample_gaps(split.observation_length, irregularity, &mut irregularity.patient_stream(p, epoch))?;
        for &s in &visits.retained {
            monitor.touch(p, s);
        }
        let enc = encode_visits(&cohort.patients[p], &visits, &cohort.schema, normalizer, irregularity)?;
        match make_example(kind, &enc, &visits, irregularity.g_max)? {
            Some(e) => out.push(e),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Fewest Δt = 1 targets from which the rollout noise scale is estimated
/// before falling back to all targets.
const MIN_UNIT_GAP_TARGETS: usize = 50;

/// Root-mean-square residual of the numeric head per feature, in z units.
///
/// The seq2seq decoder is told the gap to its target and rollouts always
/// step by Δt = 1, so its spread comes from the Δt = 1 targets when there
/// are enough of them. The causal model never sees the target gap; its
/// predictions average over gaps, and the spread over all targets is what
/// keeps the generated process at the data's variance.
fn residual_scale(model: &Model, examples: &[Example], batch_size: usize) -> Result<Vec<f64>> {
    let n = model.layout.n_numeric;
    let dt_scale = model.calibration.dt_scale as f64;
    let d = model.config.input_dim;
    // (sum of squares, count) over every target, then over Δt = 1 targets.
    let mut all = (vec![0.0; n], 0usize);
    let mut unit = (vec![0.0; n], 0usize);
    for chunk in examples.chunks(batch_size) {
        let g = Graph::new();
        let vars = g.params(&model.params.tensors)?;
        let inputs: Vec<ModelInput<'_>> = chunk.iter().map(|e| e.input()).collect();
        let pred = model.forward_batch(&g, &vars, &inputs)?;
        let Some(num) = pred.numeric else {
            return Ok(Vec::new());
        };
        let p = num.value();
        let mut r = 0;
        for e in chunk {
            for q in 0..e.target.shape()[0] {
                // A target's own Δt channel is its gap from the visit before.
                let gap = (e.target.get(q, d - 1) * dt_scale).round() as u32;
                for f in 0..n {
                    let err = p.get(r, f) - e.target.get(q, f);
                    all.0[f] += err * err;
                    if gap == 1 {
                        unit.0[f] += err * err;
                    }
                }
                all.1 += 1;
                if gap == 1 {
                    unit.1 += 1;
                }
                r += 1;
            }
        }
    }
    let gap_aware = model.kind() == ModelKind::LstmSeq2seq;
    let (sq, count) = if gap_aware && unit.1 >= MIN_UNIT_GAP_TARGETS { unit } else { all };
    Ok(sq.into_iter().map(|s| (s / count.max(1) as f64).sqrt()).collect())
}

/// Fits a fresh model on the training patients' observation windows.
///
/// The normaliser is fitted on the same windows. Each epoch visits the
/// eligible sequences in an order drawn from `(seed, epoch)` and takes one
/// Adam step per minibatch.
pub fn train(
    model_cfg: ModelConfig,
    cohort: &Cohort,
    split: &SplitResult,
    irregularity: &IrregularitySpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    irregularity.validate()?;
    let schema = &cohort.schema;
    let obs = split.observation_length;
    if split.train.is_empty() {
        return Err(Error::contract("no training patients"));
    }
    let mut monitor = AccessMonitor::new(cohort.len(), split);
    for &p in &split.train {
        for s in 1..=obs {
            monitor.touch(p, s);
        }
    }
    let normalizer = fit_normalizer(cohort, &split.train, 1, obs)?;

    let mut model = Model::new(model_cfg, OutputLayout::from_schema(schema))?;
    model.calibration.dt_scale = irregularity.g_max;
    model.calibration.normalizer = Some(normalizer.clone());
    let mut adam = AdamState::new(&model.params.tensors, cfg.lr);
    let weights = cfg.weights();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let mut cached: Option<(Vec<Example>, usize)> = None;
    let mut last_examples = Vec::new();
    let mut skipped_sequences = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (examples, skipped) = match (&cached, irregularity.resample_per_epoch) {
            (Some(c), false) => c.clone(),
            _ => {
                let built = epoch_examples(model.kind(), cohort, split, irregularity, &normalizer, epoch, &mut monitor)?;
                if !irregularity.resample_per_epoch {
                    cached = Some(built.clone());
                }
                built
            }
        };
        skipped_sequences = skipped;
        if examples.is_empty() {
            return Err(Error::contract(
                "every training window has a single retained visit; lower g_max or lengthen the window",
            ));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, epoch as u64));

        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let diverged = |loss: f64| Error::Diverged {
                epoch: epoch + 1,
                batch: b + 1,
                loss,
            };
            let (loss, grads) = match loss_and_gradients(&model, &batch, weights) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            for (t, g) in model.params.tensors.iter_mut().zip(grads) {
                t.set_grad(g)?;
            }
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut model.params.tensors, c)?;
            }
            adam_step(&mut model.params.tensors, &mut adam)?;
            if model.params.tensors.iter().any(|t| !t.is_finite()) {
                return Err(diverged(loss));
            }
            total += loss;
            batches += 1;
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: total / batches as f64,
            batches,
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());
        last_examples = examples;
    }

    model.calibration.noise_scale = residual_scale(&model, &last_examples, cfg.batch_size)?;
    let report = TrainReport {
        model: model.kind(),
        epochs,
        adam_steps: adam.t,
        sequences: last_examples.len(),
        skipped_sequences,
        noise_scale: model.calibration.noise_scale.clone(),
        checksum: model.params.checksum(),
        leakage: monitor.audit,
        epoch_seconds,
    };
    Ok((model, report))
}
