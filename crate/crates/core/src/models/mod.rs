//! The two autoregressive architectures, their shared per-feature output
//! heads, autoregressive rollout, and the binary parameter container.

mod io;
mod lstm;
mod rollout;
mod transformer;

pub use io::{load_model, read_model, save_model, write_model};
pub use lstm::{lstm_cell, LstmParams};
pub use rollout::{rollout, rollout_batch, Decoding, SynthesizedWindow};
pub use transformer::attention_maps;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureSchema, Normalizer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LstmSeq2seq,
    EthosLite,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LstmSeq2seq => "lstm_seq2seq",
            ModelKind::EthosLite => "ethos_lite",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm_seq2seq" | "lstm" => Ok(ModelKind::LstmSeq2seq),
            "ethos_lite" | "transformer" => Ok(ModelKind::EthosLite),
            other => Err(Error::config(
                "model",
                format!("unknown model `{other}` (expected lstm_seq2seq or ethos_lite)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub const HIDDEN: usize = 64;
    pub const HEADS: usize = 4;
    pub const FFN_EXPANSION: usize = 4;

    pub fn lstm(input_dim: usize, max_positions: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::LstmSeq2seq,
            input_dim,
            hidden_dim: Self::HIDDEN,
            layers: 1,
            heads: 1,
            max_positions,
            seed,
        }
    }

    pub fn ethos_lite(input_dim: usize, max_positions: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::EthosLite,
            input_dim,
            hidden_dim: Self::HIDDEN,
            layers: 2,
            heads: Self::HEADS,
            max_positions,
            seed,
        }
    }

    pub fn for_kind(kind: ModelKind, input_dim: usize, max_positions: usize, seed: u64) -> Self {
        match kind {
            ModelKind::LstmSeq2seq => Self::lstm(input_dim, max_positions, seed),
            ModelKind::EthosLite => Self::ethos_lite(input_dim, max_positions, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.layers == 0 || self.max_positions == 0 {
            return Err(Error::config("model", "dimensions must be positive"));
        }
        if self.kind == ModelKind::LstmSeq2seq && self.layers != 1 {
            return Err(Error::config("model.layers", "the LSTM encoder-decoder has one layer"));
        }
        if self.kind == ModelKind::EthosLite && (self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads)) {
            return Err(Error::config(
                "model.heads",
                format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.heads),
            ));
        }
        Ok(())
    }
}

/// Output dimensions: one numeric head of width `n_numeric`, one logit head
/// per categorical feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub n_numeric: usize,
    pub level_counts: Vec<usize>,
}

impl OutputLayout {
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        OutputLayout {
            n_numeric: schema.n_numeric(),
            level_counts: schema.level_counts(),
        }
    }

    pub fn encoded_dim(&self) -> usize {
        self.n_numeric + self.level_counts.iter().sum::<usize>() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPrediction {
    /// z-scored numeric values.
    pub numeric: Vec<f64>,
    pub categorical_logits: Vec<Vec<f64>>,
}

/// Named parameter tensors in a fixed creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameter indices of the output heads.
#[derive(Debug, Clone, PartialEq)]
struct HeadParams {
    numeric_w: Option<usize>,
    numeric_b: Option<usize>,
    categorical: Vec<(usize, usize)>,
}

impl HeadParams {
    fn init<R: rand::Rng>(params: &mut ParamSet, hidden: usize, layout: &OutputLayout, rng: &mut R) -> Self {
        let (numeric_w, numeric_b) = if layout.n_numeric > 0 {
            (
                Some(params.add("head.numeric.w", Tensor::uniform_init(hidden, layout.n_numeric, hidden, rng))),
                Some(params.add("head.numeric.b", Tensor::zeros(vec![1, layout.n_numeric]))),
            )
        } else {
            (None, None)
        };
        let categorical = layout
            .level_counts
            .iter()
            .enumerate()
            .map(|(f, &k)| {
                (
                    params.add(format!("head.cat{f}.w"), Tensor::uniform_init(hidden, k, hidden, rng)),
                    params.add(format!("head.cat{f}.b"), Tensor::zeros(vec![1, k])),
                )
            })
            .collect();
        HeadParams {
            numeric_w,
            numeric_b,
            categorical,
        }
    }

    fn apply<'g>(&self, vars: &[Var<'g>], hidden: Var<'g>) -> Result<BatchPrediction<'g>> {
        let numeric = match (self.numeric_w, self.numeric_b) {
            (Some(w), Some(b)) => Some(hidden.matmul(vars[w])?.add_row(vars[b])?),
            _ => None,
        };
        let logits = self
            .categorical
            .iter()
            .map(|&(w, b)| hidden.matmul(vars[w])?.add_row(vars[b]))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchPrediction { numeric, logits })
    }
}

/// Predictions for a stack of steps, one row per step.
pub struct BatchPrediction<'g> {
    pub numeric: Option<Var<'g>>,
    pub logits: Vec<Var<'g>>,
}

impl BatchPrediction<'_> {
    pub fn rows(&self) -> usize {
        self.numeric
            .map(|v| v.rows())
            .or_else(|| self.logits.first().map(|v| v.rows()))
            .unwrap_or(0)
    }

    pub fn to_steps(&self) -> Vec<StepPrediction> {
        let numeric = self.numeric.map(|v| v.value());
        let logits: Vec<Tensor> = self.logits.iter().map(|v| v.value()).collect();
        (0..self.rows())
            .map(|r| StepPrediction {
                numeric: numeric.as_ref().map(|t| t.row(r).to_vec()).unwrap_or_default(),
                categorical_logits: logits.iter().map(|t| t.row(r).to_vec()).collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    Lstm(lstm::Seq2SeqParams),
    Ethos(transformer::EthosParams),
}

/// One training or evaluation sequence.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    /// Encoder visits, then teacher-forced decoder inputs.
    Seq2Seq { encoder: &'a Tensor, decoder: &'a Tensor },
    /// Causal sequence; row `t` predicts the next visit.
    Causal { steps: &'a Tensor },
}

/// Non-trainable state a fitted model carries into rollout: the Δt scale
/// seen in training, per-feature residual spread of the numeric head (in
/// z units) for sampled decoding, and the training normaliser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub dt_scale: u32,
    pub noise_scale: Vec<f64>,
    pub normalizer: Option<Normalizer>,
}

impl Calibration {
    fn untrained(n_numeric: usize) -> Self {
        Calibration {
            dt_scale: 1,
            noise_scale: vec![0.0; n_numeric],
            normalizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: OutputLayout,
    pub params: ParamSet,
    pub calibration: Calibration,
    arch: Arch,
}

impl Model {
    /// Seeded initialisation: weights uniform in ±1/sqrt(fan_in), biases
    /// zero.
    pub fn new(config: ModelConfig, layout: OutputLayout) -> Result<Self> {
        config.validate()?;
        if layout.encoded_dim() != config.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("{} does not match the encoded width {}", config.input_dim, layout.encoded_dim()),
            ));
        }
        let mut rng = rng::stream(config.seed);
        let mut params = ParamSet::default();
        let arch = match config.kind {
            ModelKind::LstmSeq2seq => Arch::Lstm(lstm::Seq2SeqParams::init(&mut params, &config, &layout, &mut rng)),
            ModelKind::EthosLite => Arch::Ethos(transformer::EthosParams::init(&mut params, &config, &layout, &mut rng)),
        };
        Ok(Model {
            config,
            calibration: Calibration::untrained(layout.n_numeric),
            layout,
            params,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Forward pass over a batch of sequences. Output rows are ordered
    /// sequence by sequence, one per predicted step.
    pub fn forward_batch<'g>(
        &self,
        graph: &'g Graph,
        vars: &[Var<'g>],
        inputs: &[ModelInput<'_>],
    ) -> Result<BatchPrediction<'g>> {
        if inputs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        match &self.arch {
            Arch::Lstm(p) => {
                let pairs = inputs
                    .iter()
                    .map(|i| match i {
                        ModelInput::Seq2Seq { encoder, decoder } => Ok((*encoder, *decoder)),
                        ModelInput::Causal { .. } => Err(Error::contract("LSTM expects encoder/decoder inputs")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                p.forward(graph, vars, &self.config, &pairs)
            }
            Arch::Ethos(p) => {
                let seqs = inputs
                    .iter()
                    .map(|i| match i {
                        ModelInput::Causal { steps } => Ok(*steps),
                        ModelInput::Seq2Seq { .. } => Err(Error::contract("Transformer expects causal inputs")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(p.forward(graph, vars, &self.config, &seqs)?.0)
            }
        }
    }

    /// Seq2seq forward for one sequence: the encoder consumes
    /// `encoder_steps`, the decoder emits one prediction per decoder input.
    pub fn seq2seq_forward(&self, encoder_steps: &Tensor, decoder_inputs: &Tensor) -> Result<Vec<StepPrediction>> {
        if self.kind() != ModelKind::LstmSeq2seq {
            return Err(Error::contract("seq2seq_forward needs an LSTM model"));
        }
        let g = Graph::new();
        let vars = g.params(&self.params.tensors)?;
        Ok(self
            .forward_batch(&g, &vars, &[ModelInput::Seq2Seq { encoder: encoder_steps, decoder: decoder_inputs }])?
            .to_steps())
    }

    /// Causal forward for one sequence: one prediction per position.
    pub fn transformer_forward(&self, steps: &Tensor) -> Result<Vec<StepPrediction>> {
        if self.kind() != ModelKind::EthosLite {
            return Err(Error::contract("transformer_forward needs an ETHOS-lite model"));
        }
        let g = Graph::new();
        let vars = g.params(&self.params.tensors)?;
        Ok(self.forward_batch(&g, &vars, &[ModelInput::Causal { steps }])?.to_steps())
    }

    /// Closed-form parameter count implied by the configuration.
    pub fn expected_parameter_count(config: &ModelConfig, layout: &OutputLayout) -> usize {
        let h = config.hidden_dim;
        let d = config.input_dim;
        let heads = layout.n_numeric * (h + 1) + layout.level_counts.iter().map(|k| k * (h + 1)).sum::<usize>();
        match config.kind {
            ModelKind::LstmSeq2seq => 2 * 4 * (d * h + h * h + h) + heads,
            ModelKind::EthosLite => {
                let f = Self::FFN_WIDTH_FACTOR * h;
                let block = 4 * h + 4 * (h * h + h) + (h * f + f) + (f * h + h);
                (d * h + h) + config.max_positions * h + config.layers * block + 2 * h + heads
            }
        }
    }

    const FFN_WIDTH_FACTOR: usize = ModelConfig::FFN_EXPANSION;
}
