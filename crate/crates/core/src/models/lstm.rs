use rand::Rng;

use super::{BatchPrediction, HeadParams, ModelConfig, OutputLayout, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Graph, Tensor, Var};

/// Indices of one LSTM's input weights `[D, 4H]`, recurrent weights
/// `[H, 4H]` and bias `[1, 4H]`. Gate blocks are ordered i, f, g, o.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub w: usize,
    pub u: usize,
    pub b: usize,
}

impl LstmParams {
    fn init<R: Rng>(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmParams {
            w: params.add(format!("{prefix}.w"), Tensor::uniform_init(input, 4 * hidden, input, rng)),
            u: params.add(format!("{prefix}.u"), Tensor::uniform_init(hidden, 4 * hidden, hidden, rng)),
            b: params.add(format!("{prefix}.b"), Tensor::zeros(vec![1, 4 * hidden])),
        }
    }
}

/// One LSTM step over a batch: `x` is `[B, D]`, `h` and `c` are `[B, H]`.
pub fn lstm_cell<'g>(
    x: Var<'g>,
    h: Var<'g>,
    c: Var<'g>,
    w: Var<'g>,
    u: Var<'g>,
    b: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let hidden = h.cols();
    if w.cols() != 4 * hidden || u.dims() != (hidden, 4 * hidden) || c.dims() != h.dims() {
        return Err(Error::shape(format!(
            "lstm_cell: w {:?}, u {:?}, h {:?}, c {:?}",
            w.dims(),
            u.dims(),
            h.dims(),
            c.dims()
        )));
    }
    let z = x.matmul(w)?.add(h.matmul(u)?)?.add_row(b)?;
    let i = z.slice_cols(0, hidden)?.sigmoid()?;
    let f = z.slice_cols(hidden, hidden)?.sigmoid()?;
    let g = z.slice_cols(2 * hidden, hidden)?.tanh()?;
    let o = z.slice_cols(3 * hidden, hidden)?.sigmoid()?;
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh()?)?;
    Ok((h_next, c_next))
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Seq2SeqParams {
    encoder: LstmParams,
    decoder: LstmParams,
    heads: HeadParams,
}

impl Seq2SeqParams {
    pub(super) fn init<R: Rng>(params: &mut ParamSet, cfg: &ModelConfig, layout: &OutputLayout, rng: &mut R) -> Self {
        let encoder = LstmParams::init(params, "encoder", cfg.input_dim, cfg.hidden_dim, rng);
        let decoder = LstmParams::init(params, "decoder", cfg.input_dim, cfg.hidden_dim, rng);
        let heads = HeadParams::init(params, cfg.hidden_dim, layout, rng);
        Seq2SeqParams { encoder, decoder, heads }
    }

    /// Runs the encoder over each sequence's encoder steps, hands the final
    /// state to the decoder and reads one prediction per decoder input.
    /// Sequences of unequal length are padded; padded steps leave the state
    /// untouched and are dropped from the output.
    pub(super) fn forward<'g>(
        &self,
        graph: &'g Graph,
        vars: &[Var<'g>],
        cfg: &ModelConfig,
        batch: &[(&Tensor, &Tensor)],
    ) -> Result<BatchPrediction<'g>> {
        let hidden = cfg.hidden_dim;
        let n = batch.len();
        for (e, d) in batch {
            for t in [e, d] {
                let (rows, cols) = t.dims2()?;
                if cols != cfg.input_dim || rows == 0 {
                    return Err(Error::shape(format!(
                        "sequence {:?} does not match input width {}",
                        t.shape(),
                        cfg.input_dim
                    )));
                }
            }
        }
        let zeros = graph.constant_from(n, hidden, vec![0.0; n * hidden])?;
        let (mut h, mut c) = (zeros, zeros);

        let enc_lens: Vec<usize> = batch.iter().map(|(e, _)| e.shape()[0]).collect();
        run(graph, vars, self.encoder, cfg, batch.iter().map(|p| p.0), &enc_lens, &mut h, &mut c)?;

        let dec_lens: Vec<usize> = batch.iter().map(|(_, d)| d.shape()[0]).collect();
        let outputs = run(graph, vars, self.decoder, cfg, batch.iter().map(|p| p.1), &dec_lens, &mut h, &mut c)?;

        // outputs[t] is [n, H]; stacked row t*n + b belongs to sequence b.
        let stacked = concat_rows(&outputs)?;
        let index: Vec<usize> = (0..n).flat_map(|b| (0..dec_lens[b]).map(move |t| t * n + b)).collect();
        let rows = stacked.gather_rows(index)?;
        self.heads.apply(vars, rows)
    }
}

impl Seq2SeqParams {
    /// Final encoder state `(h, c)` of equal-length sequences.
    pub(super) fn encode<'g>(
        &self,
        graph: &'g Graph,
        vars: &[Var<'g>],
        cfg: &ModelConfig,
        seqs: &[&Tensor],
    ) -> Result<(Var<'g>, Var<'g>)> {
        let n = seqs.len();
        let zeros = graph.constant_from(n, cfg.hidden_dim, vec![0.0; n * cfg.hidden_dim])?;
        let (mut h, mut c) = (zeros, zeros);
        let lens: Vec<usize> = seqs.iter().map(|s| s.shape()[0]).collect();
        run(graph, vars, self.encoder, cfg, seqs.iter().copied(), &lens, &mut h, &mut c)?;
        Ok((h, c))
    }

    /// One decoder step for a batch `x` of shape `[B, D]`.
    pub(super) fn decode_step<'g>(
        &self,
        vars: &[Var<'g>],
        x: Var<'g>,
        h: Var<'g>,
        c: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>, BatchPrediction<'g>)> {
        let p = self.decoder;
        let (h, c) = lstm_cell(x, h, c, vars[p.w], vars[p.u], vars[p.b])?;
        let pred = self.heads.apply(vars, h)?;
        Ok((h, c, pred))
    }
}

/// Steps `lens.len()` sequences through one LSTM in lockstep and returns the
/// hidden state after every time step.
#[allow(clippy::too_many_arguments)]
fn run<'g, 'a>(
    graph: &'g Graph,
    vars: &[Var<'g>],
    p: LstmParams,
    cfg: &ModelConfig,
    seqs: impl Iterator<Item = &'a Tensor>,
    lens: &[usize],
    h: &mut Var<'g>,
    c: &mut Var<'g>,
) -> Result<Vec<Var<'g>>> {
    let seqs: Vec<&Tensor> = seqs.collect();
    let n = seqs.len();
    let d = cfg.input_dim;
    let hidden = cfg.hidden_dim;
    let steps = lens.iter().copied().max().unwrap_or(0);
    let ragged = lens.iter().any(|&l| l != steps);
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut x = vec![0.0; n * d];
        for (b, s) in seqs.iter().enumerate() {
            if t < lens[b] {
                x[b * d..(b + 1) * d].copy_from_slice(s.row(t));
            }
        }
        let x = graph.constant_from(n, d, x)?;
        let (h_new, c_new) = lstm_cell(x, *h, *c, vars[p.w], vars[p.u], vars[p.b])?;
        if ragged {
            let mut m = vec![0.0; n * hidden];
            for b in 0..n {
                if t < lens[b] {
                    m[b * hidden..(b + 1) * hidden].fill(1.0);
                }
            }
            let m = graph.constant_from(n, hidden, m)?;
            *h = h.add(m.mul(h_new.sub(*h)?)?)?;
            *c = c.add(m.mul(c_new.sub(*c)?)?)?;
        } else {
            *h = h_new;
            *c = c_new;
        }
        hs.push(*h);
    }
    Ok(hs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_schema;
    use crate::models::{Model, ModelConfig, OutputLayout};
    use crate::rng;

    fn cell_on(x: &[f64], h: &[f64], c: &[f64], w: Tensor, u: Tensor, b: Tensor) -> (Vec<f64>, Vec<f64>) {
        let g = Graph::new();
        let hd = h.len();
        let xv = g.constant_from(1, x.len(), x.to_vec()).unwrap();
        let hv = g.constant_from(1, hd, h.to_vec()).unwrap();
        let cv = g.constant_from(1, hd, c.to_vec()).unwrap();
        let (w, u, b) = (g.constant(&w).unwrap(), g.constant(&u).unwrap(), g.constant(&b).unwrap());
        let (h2, c2) = lstm_cell(xv, hv, cv, w, u, b).unwrap();
        (h2.value().into_data(), c2.value().into_data())
    }

    #[test]
    fn zero_parameters_and_state_give_zero_state() {
        let (h, c) = cell_on(
            &[0.3, -1.2, 0.7],
            &[0.0; 4],
            &[0.0; 4],
            Tensor::zeros(vec![3, 16]),
            Tensor::zeros(vec![4, 16]),
            Tensor::zeros(vec![1, 16]),
        );
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_the_cell() {
        // Forget-gate bias large: c' = c + i*g to within sigmoid saturation.
        let mut b = vec![0.0; 8];
        b[2..4].fill(50.0);
        b[4..6].fill(0.3);
        let (_, c) = cell_on(
            &[0.0],
            &[0.0, 0.0],
            &[0.8, -0.4],
            Tensor::zeros(vec![1, 8]),
            Tensor::zeros(vec![2, 8]),
            Tensor::matrix(1, 8, b).unwrap(),
        );
        let ig = 0.5 * 0.3f64.tanh();
        assert!((c[0] - (0.8 + ig)).abs() < 1e-12);
        assert!((c[1] - (-0.4 + ig)).abs() < 1e-12);
    }

    #[test]
    fn padded_batch_matches_individual_sequences() {
        let layout = OutputLayout::from_schema(&make_schema("hypotension").unwrap());
        let model = Model::new(ModelConfig::lstm(12, 48, 3), layout).unwrap();
        let mut r = rng::stream(11);
        let mk = |rows: usize, r: &mut rng::Stream| Tensor::uniform_init(rows, 12, 1, r);
        let seqs = [(mk(3, &mut r), mk(2, &mut r)), (mk(5, &mut r), mk(4, &mut r))];
        let g = Graph::new();
        let vars = g.params(&model.params.tensors).unwrap();
        let inputs: Vec<_> = seqs
            .iter()
            .map(|(e, d)| crate::models::ModelInput::Seq2Seq { encoder: e, decoder: d })
            .collect();
        let batch = model.forward_batch(&g, &vars, &inputs).unwrap().to_steps();
        let mut single = Vec::new();
        for (e, d) in &seqs {
            single.extend(model.seq2seq_forward(e, d).unwrap());
        }
        assert_eq!(batch.len(), 6);
        for (a, b) in batch.iter().zip(&single) {
            for (x, y) in a.numeric.iter().zip(&b.numeric) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
