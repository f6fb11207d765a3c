use rand::Rng;

use super::{BatchPrediction, HeadParams, Model, ModelConfig, ModelKind, OutputLayout, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{concat_cols, concat_rows, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Pre-norm decoder-only Transformer over visit vectors: input projection
/// plus learned positions, `layers` blocks of causal multi-head attention
/// and a ReLU feed-forward, a final LayerNorm and the shared heads.
#[derive(Debug, Clone, PartialEq)]
pub(super) struct EthosParams {
    w_in: usize,
    b_in: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln_g: usize,
    ln_b: usize,
    heads: HeadParams,
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![1, n], vec![1.0; n]).expect("nonzero width")
}

impl EthosParams {
    pub(super) fn init<R: Rng>(params: &mut ParamSet, cfg: &ModelConfig, layout: &OutputLayout, rng: &mut R) -> Self {
        let (d, h) = (cfg.input_dim, cfg.hidden_dim);
        let f = ModelConfig::FFN_EXPANSION * h;
        let w_in = params.add("input.w", Tensor::uniform_init(d, h, d, rng));
        let b_in = params.add("input.b", Tensor::zeros(vec![1, h]));
        // Positions start at zero so the rollout positions beyond the
        // training windows carry no random offset.
        let pos = params.add("position", Tensor::zeros(vec![cfg.max_positions, h]));
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut lin = |name: &str, rows: usize, cols: usize, params: &mut ParamSet| {
                    (
                        params.add(format!("block{l}.{name}.w"), Tensor::uniform_init(rows, cols, rows, rng)),
                        params.add(format!("block{l}.{name}.b"), Tensor::zeros(vec![1, cols])),
                    )
                };
                let ln1_g = params.add(format!("block{l}.ln1.g"), ones(h));
                let ln1_b = params.add(format!("block{l}.ln1.b"), Tensor::zeros(vec![1, h]));
                let (wq, bq) = lin("q", h, h, params);
                let (wk, bk) = lin("k", h, h, params);
                let (wv, bv) = lin("v", h, h, params);
                let (wo, bo) = lin("o", h, h, params);
                let ln2_g = params.add(format!("block{l}.ln2.g"), ones(h));
                let ln2_b = params.add(format!("block{l}.ln2.b"), Tensor::zeros(vec![1, h]));
                let (w1, b1) = lin("ffn1", h, f, params);
                let (w2, b2) = lin("ffn2", f, h, params);
                Block {
                    ln1_g,
                    ln1_b,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_g,
                    ln2_b,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let ln_g = params.add("final_ln.g", ones(h));
        let ln_b = params.add("final_ln.b", Tensor::zeros(vec![1, h]));
        let heads = HeadParams::init(params, h, layout, rng);
        EthosParams {
            w_in,
            b_in,
            pos,
            blocks,
            ln_g,
            ln_b,
            heads,
        }
    }

    /// Sequences are stacked row-wise; every row-wise op stays within its
    /// row, and attention runs per sequence and head on row and column
    /// slices. Returns the heads' output and every attention weight matrix
    /// in block-major, then sequence, then head order.
    pub(super) fn forward<'g>(
        &self,
        graph: &'g Graph,
        vars: &[Var<'g>],
        cfg: &ModelConfig,
        seqs: &[&Tensor],
    ) -> Result<(BatchPrediction<'g>, Vec<Var<'g>>)> {
        let (d, h) = (cfg.input_dim, cfg.hidden_dim);
        let dh = h / cfg.heads;
        let mut lens = Vec::with_capacity(seqs.len());
        let mut data = Vec::new();
        for s in seqs {
            let (rows, cols) = s.dims2()?;
            if cols != d {
                return Err(Error::shape(format!("sequence width {cols}, model expects {d}")));
            }
            if rows > cfg.max_positions {
                return Err(Error::config(
                    "model.max_positions",
                    format!("sequence of {rows} steps exceeds {} positions", cfg.max_positions),
                ));
            }
            lens.push(rows);
            data.extend_from_slice(s.data());
        }
        let total: usize = lens.iter().sum();
        let x = graph.constant_from(total, d, data)?;
        let positions: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let mut hidden = x
            .matmul(vars[self.w_in])?
            .add_row(vars[self.b_in])?
            .add(vars[self.pos].gather_rows(positions)?)?;

        let scale = 1.0 / (dh as f64).sqrt();

        let mut maps = Vec::new();
        for blk in &self.blocks {
            let a = hidden.layer_norm()?.mul_row(vars[blk.ln1_g])?.add_row(vars[blk.ln1_b])?;
            let q = a.matmul(vars[blk.wq])?.add_row(vars[blk.bq])?;
            let k = a.matmul(vars[blk.wk])?.add_row(vars[blk.bk])?;
            let v = a.matmul(vars[blk.wv])?.add_row(vars[blk.bv])?;
            let mut per_seq = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &len in &lens {
                let (qs, ks, vs) = (q.row_range(start, len)?, k.row_range(start, len)?, v.row_range(start, len)?);
                let mut per_head = Vec::with_capacity(cfg.heads);
                for head in 0..cfg.heads {
                    let qh = qs.slice_cols(head * dh, dh)?;
                    let kh = ks.slice_cols(head * dh, dh)?;
                    let vh = vs.slice_cols(head * dh, dh)?;
                    let w = qh.matmul(kh.transpose()?)?.scale(scale)?.causal_softmax()?;
                    maps.push(w);
                    per_head.push(w.matmul(vh)?);
                }
                per_seq.push(concat_cols(&per_head)?);
                start += len;
            }
            let attn = concat_rows(&per_seq)?.matmul(vars[blk.wo])?.add_row(vars[blk.bo])?;
            hidden = hidden.add(attn)?;

            let m = hidden.layer_norm()?.mul_row(vars[blk.ln2_g])?.add_row(vars[blk.ln2_b])?;
            let ff = m
                .matmul(vars[blk.w1])?
                .add_row(vars[blk.b1])?
                .relu()?
                .matmul(vars[blk.w2])?
                .add_row(vars[blk.b2])?;
            hidden = hidden.add(ff)?;
        }
        let out = hidden.layer_norm()?.mul_row(vars[self.ln_g])?.add_row(vars[self.ln_b])?;
        Ok((self.heads.apply(vars, out)?, maps))
    }
}

/// Attention weight matrices of one causal forward pass, one `[T, T]`
/// matrix per block and head.
pub fn attention_maps(model: &Model, steps: &Tensor) -> Result<Vec<Tensor>> {
    let p = match (&model.arch, model.kind()) {
        (super::Arch::Ethos(p), ModelKind::EthosLite) => p,
        _ => return Err(Error::contract("attention maps need an ETHOS-lite model")),
    };
    let g = Graph::new();
    let vars = g.params(&model.params.tensors)?;
    let (_, maps) = p.forward(&g, &vars, &model.config, &[steps])?;
    Ok(maps.iter().map(|m| m.value()).collect())
}
