use std::cell::{Cell, RefCell};
use std::fmt;

use super::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Act(Activation, usize),
    SoftmaxRows(usize),
    CausalSoftmax(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    SliceCols { input: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { input: usize, index: Vec<usize> },
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mse(usize, usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Act(Activation::Sigmoid, _) => "sigmoid",
            Op::Act(Activation::Tanh, _) => "tanh",
            Op::Act(Activation::Relu, _) => "relu",
            Op::SoftmaxRows(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy_loss",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Define-by-run differentiation graph. Nodes are appended in evaluation
/// order, so reverse insertion order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("backward_done", &self.backward_done.get())
            .finish()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.dims();
        write!(f, "Var#{}[{r}x{c}]", self.id)
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var<'_>> {
        debug_assert_eq!(rows * cols, value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Constant input; gradients flow into it but it is not a parameter.
    pub fn constant(&self, t: &Tensor) -> Result<Var<'_>> {
        let (r, c) = t.dims2()?;
        self.push(r, c, t.data().to_vec(), Op::Leaf { param: None })
    }

    pub fn constant_from(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var<'_>> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "{rows}x{cols} constant from {} values",
                data.len()
            )));
        }
        self.push(rows, cols, data, Op::Leaf { param: None })
    }

    /// Parameter leaf; `index` identifies the tensor in the caller's
    /// parameter list for [`Gradients::accumulate_into`].
    pub fn param(&self, index: usize, t: &Tensor) -> Result<Var<'_>> {
        let (r, c) = t.dims2()?;
        self.push(r, c, t.data().to_vec(), Op::Leaf { param: Some(index) })
    }

    /// Registers every tensor of a parameter list, in order.
    pub fn params(&self, tensors: &[Tensor]) -> Result<Vec<Var<'_>>> {
        tensors
            .iter()
            .enumerate()
            .map(|(i, t)| self.param(i, t))
            .collect()
    }

    fn dims(&self, id: usize) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id].rows, nodes[id].cols)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    fn check_same(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::contract("variables belong to different graphs"))
        }
    }

    /// Allows another backward pass over the same graph.
    pub fn zero_grad(&self) {
        self.backward_done.set(false);
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same(loss)?;
        if self.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((id, p)),
                _ => None,
            })
            .collect();
        let lens = nodes.iter().map(|n| n.value.len()).collect();
        self.backward_done.set(true);
        Ok(Gradients { grads, lens, params })
    }

    fn binary_same_shape(&self, a: Var<'_>, b: Var<'_>, what: &str) -> Result<(usize, usize)> {
        self.check_same(a)?;
        self.check_same(b)?;
        let da = self.dims(a.id);
        let db = self.dims(b.id);
        if da != db {
            return Err(Error::shape(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(da)
    }

    fn elementwise<'g>(
        &'g self,
        a: Var<'g>,
        b: Var<'g>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (r, c) = self.binary_same_shape(a, b, op.name())?;
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id]
                .value
                .iter()
                .zip(&nodes[b.id].value)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        self.push(r, c, out, op)
    }

    fn row_broadcast<'g>(
        &'g self,
        a: Var<'g>,
        row: Var<'g>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.check_same(a)?;
        self.check_same(row)?;
        let (r, c) = self.dims(a.id);
        let (rr, rc) = self.dims(row.id);
        if rr != 1 || rc != c {
            return Err(Error::shape(format!(
                "{}: row of shape {rr}x{rc} cannot broadcast over {r}x{c}",
                op.name()
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let rv = &nodes[row.id].value;
            nodes[a.id]
                .value
                .chunks(c)
                .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        self.push(r, c, out, op)
    }

    fn unary<'g>(&'g self, a: Var<'g>, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        self.check_same(a)?;
        let (r, c) = self.dims(a.id);
        let out = self.nodes.borrow()[a.id].value.iter().map(|&x| f(x)).collect();
        self.push(r, c, out, op)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// `out[i,:] += a[i,k] * b[k,:]`, skipping exact-zero coefficients so that
/// masked attention weights never touch the masked rows of `b`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn softmax_backward_rows(y: &[f64], g: &[f64], cols: usize, dx: &mut [f64]) {
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let len_of = |id: usize| nodes[id].value.len();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].rows, nodes[*a].cols);
            let n = nodes[*b].cols;
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            {
                // dA = dC · Bᵀ
                let da = add_into(&mut grads[*a], m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            {
                // dB = Aᵀ · dC
                let db = add_into(&mut grads[*b], k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].rows, nodes[*a].cols);
            let da = add_into(&mut grads[*a], r * c);
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                let d = add_into(&mut grads[id], g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            let d = add_into(&mut grads[*a], g.len());
            d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            let d = add_into(&mut grads[*b], g.len());
            d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let d = add_into(&mut grads[*a], g.len());
            for ((x, &gv), &bb) in d.iter_mut().zip(g).zip(bv) {
                *x += gv * bb;
            }
            let d = add_into(&mut grads[*b], g.len());
            for ((x, &gv), &aa) in d.iter_mut().zip(g).zip(av) {
                *x += gv * aa;
            }
        }
        Op::AddRow(a, row) => {
            let c = node.cols;
            let d = add_into(&mut grads[*a], g.len());
            d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            let dr = add_into(&mut grads[*row], c);
            for chunk in g.chunks(c) {
                dr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
            }
        }
        Op::MulRow(a, row) => {
            let c = node.cols;
            let av = &nodes[*a].value;
            let rv = &nodes[*row].value;
            let d = add_into(&mut grads[*a], g.len());
            for (dchunk, gchunk) in d.chunks_mut(c).zip(g.chunks(c)) {
                for ((x, &gv), &r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                    *x += gv * r;
                }
            }
            let dr = add_into(&mut grads[*row], c);
            for (achunk, gchunk) in av.chunks(c).zip(g.chunks(c)) {
                for ((x, &gv), &a) in dr.iter_mut().zip(gchunk).zip(achunk) {
                    *x += gv * a;
                }
            }
        }
        Op::Scale(a, s) => {
            let d = add_into(&mut grads[*a], g.len());
            d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
        }
        Op::Act(kind, a) => {
            let d = add_into(&mut grads[*a], g.len());
            for ((x, &gv), &y) in d.iter_mut().zip(g).zip(&node.value) {
                *x += gv * kind.derivative_from_output(y);
            }
        }
        Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
            let d = add_into(&mut grads[*a], g.len());
            softmax_backward_rows(&node.value, g, node.cols, d);
        }
        Op::LayerNorm { input, inv_std } => {
            let c = node.cols;
            let n = c as f64;
            let d = add_into(&mut grads[*input], g.len());
            for (r, ((dr, gr), yr)) in d
                .chunks_mut(c)
                .zip(g.chunks(c))
                .zip(node.value.chunks(c))
                .enumerate()
            {
                let sum_g: f64 = gr.iter().sum();
                let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                let s = inv_std[r] / n;
                for ((x, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *x += s * (n * gv - sum_g - yv * sum_gy);
                }
            }
        }
        Op::SliceCols { input, start } => {
            let in_cols = nodes[*input].cols;
            let c = node.cols;
            let d = add_into(&mut grads[*input], len_of(*input));
            for (r, gr) in g.chunks(c).enumerate() {
                let base = r * in_cols + start;
                d[base..base + c].iter_mut().zip(gr).for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.cols;
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].cols;
                let d = add_into(&mut grads[p], len_of(p));
                for (r, dr) in d.chunks_mut(pc).enumerate() {
                    let src = &g[r * total + offset..r * total + offset + pc];
                    dr.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
                offset += pc;
            }
        }
        Op::GatherRows { input, index } => {
            let c = node.cols;
            let d = add_into(&mut grads[*input], len_of(*input));
            for (r, &src) in index.iter().enumerate() {
                d[src * c..(src + 1) * c]
                    .iter_mut()
                    .zip(&g[r * c..(r + 1) * c])
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let l = len_of(p);
                let d = add_into(&mut grads[p], l);
                d.iter_mut()
                    .zip(&g[offset..offset + l])
                    .for_each(|(x, y)| *x += y);
                offset += l;
            }
        }
        Op::Sum(a) => {
            let d = add_into(&mut grads[*a], len_of(*a));
            d.iter_mut().for_each(|x| *x += g[0]);
        }
        Op::Mse(p, t) => {
            let pv = &nodes[*p].value;
            let tv = &nodes[*t].value;
            let scale = 2.0 * g[0] / pv.len() as f64;
            let d = add_into(&mut grads[*p], pv.len());
            for ((x, &a), &b) in d.iter_mut().zip(pv).zip(tv) {
                *x += scale * (a - b);
            }
            let d = add_into(&mut grads[*t], tv.len());
            for ((x, &a), &b) in d.iter_mut().zip(pv).zip(tv) {
                *x -= scale * (a - b);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = nodes[*logits].cols;
            let scale = g[0] / targets.len() as f64;
            let d = add_into(&mut grads[*logits], probs.len());
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    d[r * k + j] += scale * (probs[r * k + j] - onehot);
                }
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.id]])
    }

    /// Adds the gradient of every parameter leaf into `params[index]`.
    pub fn accumulate_into(&self, params: &mut [Tensor]) -> Result<()> {
        for &(node, index) in &self.params {
            let t = params.get_mut(index).ok_or_else(|| {
                Error::contract(format!("parameter index {index} out of range"))
            })?;
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; self.lens[node]])?,
            }
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn dims(&self) -> (usize, usize) {
        self.graph.dims(self.id)
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self) -> Result<f64> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let g = self.graph;
        g.check_same(other)?;
        let (m, k) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {m}x{k} by {k2}x{n}"
            )));
        }
        let out = {
            let nodes = g.nodes.borrow();
            let mut out = vec![0.0; m * n];
            matmul_acc(&nodes[self.id].value, &nodes[other.id].value, &mut out, m, k, n);
            out
        };
        g.push(m, n, out, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        let out = {
            let nodes = g.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        };
        g.push(c, r, out, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(self, other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(self, other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.elementwise(self, other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .row_broadcast(self, row, Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row elementwise by a `1 × cols` row.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .row_broadcast(self, row, Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Scale(self.id, s), |x| x * s)
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g>> {
        self.graph.unary(self, Op::Act(kind, self.id), |x| kind.apply(x))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.activation(Activation::Tanh)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.activation(Activation::Relu)
    }

    /// Softmax along each row.
    pub fn softmax(self) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        let mut out = g.nodes.borrow()[self.id].value.clone();
        out.chunks_mut(c).for_each(softmax_in_place);
        g.push(r, c, out, Op::SoftmaxRows(self.id))
    }

    /// Row `i` of a square score matrix is normalised over columns `0..=i`;
    /// later columns are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        if r != c {
            return Err(Error::shape(format!(
                "causal_softmax needs a square matrix, got {r}x{c}"
            )));
        }
        let src = g.nodes.borrow()[self.id].value.clone();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..i * c + i + 1];
            row.copy_from_slice(&src[i * c..i * c + i + 1]);
            softmax_in_place(row);
        }
        g.push(r, c, out, Op::CausalSoftmax(self.id))
    }

    /// Per-row standardisation to zero mean and unit variance.
    pub fn layer_norm(self) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        let src = g.nodes.borrow()[self.id].value.clone();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (xr, yr) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (y, x) in yr.iter_mut().zip(xr) {
                *y = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        g.push(
            r,
            c,
            out,
            Op::LayerNorm {
                input: self.id,
                inv_std,
            },
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let out = g.nodes.borrow()[self.id]
            .value
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        g.push(r, len, out, Op::SliceCols { input: self.id, start })
    }

    pub fn gather_rows(self, index: Vec<usize>) -> Result<Var<'g>> {
        let g = self.graph;
        let (r, c) = self.dims();
        if index.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("row {bad} out of {r} rows")));
        }
        let out = {
            let nodes = g.nodes.borrow();
            let v = &nodes[self.id].value;
            index
                .iter()
                .flat_map(|&i| v[i * c..(i + 1) * c].iter().copied())
                .collect()
        };
        g.push(index.len(), c, out, Op::GatherRows { input: self.id, index })
    }

    pub fn row_range(self, start: usize, len: usize) -> Result<Var<'g>> {
        self.gather_rows((start..start + len).collect())
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let g = self.graph;
        let s = g.nodes.borrow()[self.id].value.iter().sum();
        g.push(1, 1, vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.graph.nodes.borrow()[self.id].value.len();
        self.sum()?.scale(1.0 / n as f64)
    }
}

/// Concatenates along columns; all parts must have the same row count.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
    let g = first.graph;
    let r = first.rows();
    let mut total = 0;
    for p in parts {
        g.check_same(*p)?;
        if p.rows() != r {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        total += p.cols();
    }
    let out = {
        let nodes = g.nodes.borrow();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let n = &nodes[p.id];
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        out
    };
    g.push(r, total, out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
}

/// Stacks rows; all parts must have the same column count.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
    let g = first.graph;
    let c = first.cols();
    let mut rows = 0;
    for p in parts {
        g.check_same(*p)?;
        if p.cols() != c {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        rows += p.rows();
    }
    let out = {
        let nodes = g.nodes.borrow();
        let mut out = Vec::with_capacity(rows * c);
        for p in parts {
            out.extend_from_slice(&nodes[p.id].value);
        }
        out
    };
    g.push(rows, c, out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
}

/// Mean of squared differences over all entries.
pub fn mse_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    let g = pred.graph;
    g.binary_same_shape(pred, target, "mse_loss")?;
    let v = {
        let nodes = g.nodes.borrow();
        let p = &nodes[pred.id].value;
        let t = &nodes[target.id].value;
        p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
    };
    g.push(1, 1, vec![v], Op::Mse(pred.id, target.id))
}

/// Mean negative log-softmax probability of each row's target class.
pub fn cross_entropy_loss<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let g = logits.graph;
    let (n, k) = logits.dims();
    if targets.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy_loss: {n} rows but {} targets",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::contract(format!(
            "target index {bad} outside [0, {k})"
        )));
    }
    let (loss, probs) = {
        let nodes = g.nodes.borrow();
        let v = &nodes[logits.id].value;
        let mut probs = v.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(&mut probs[r * k..(r + 1) * k]);
        }
        (total / n as f64, probs)
    };
    g.push(
        1,
        1,
        vec![loss],
        Op::CrossEntropy {
            logits: logits.id,
            targets: targets.to_vec(),
            probs,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let a = g.constant(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let id = g.constant(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let zero = g.constant(&Tensor::zeros(vec![2, 2])).unwrap();
        let b = g.constant(&m(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        assert_eq!(a.matmul(id).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(zero).unwrap().value().data(), &[0.0; 4]);
        // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
        assert_eq!(a.matmul(b).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("2x3") && msg.contains("by 2x3"), "{msg}");
    }

    #[test]
    fn activation_examples() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(x.sigmoid().unwrap().value().data(), &[0.5; 6]);
        assert_eq!(x.tanh().unwrap().value().data(), &[0.0; 6]);
        let loss = x.sigmoid().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), vec![0.25; 6]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::scalar(3.0)).unwrap();
        let loss = x.mul(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), vec![6.0]);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let g = Graph::new();
        let x = g.param(0, &Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let loss = x.sum().unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::State(_))));
        g.zero_grad();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let g = Graph::new();
        let mut params = vec![Tensor::scalar(2.0), Tensor::zeros(vec![1, 3])];
        let vars = g.params(&params).unwrap();
        let loss = vars[0].mul(vars[0]).unwrap();
        g.backward(loss).unwrap().accumulate_into(&mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[4.0]);
        assert_eq!(params[1].grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn mse_examples() {
        let g = Graph::new();
        let p = g.param(0, &m(&[&[1.0, 1.0]])).unwrap();
        let t = g.constant(&m(&[&[0.0, 0.0]])).unwrap();
        let same = mse_loss(p, p).unwrap();
        assert_eq!(same.scalar().unwrap(), 0.0);
        let loss = mse_loss(p, t).unwrap();
        assert_eq!(loss.scalar().unwrap(), 1.0);
        assert_eq!(g.backward(loss).unwrap().wrt(p), vec![1.0, 1.0]);
        let bad = g.constant(&Tensor::zeros(vec![1, 3])).unwrap();
        assert!(matches!(mse_loss(p, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let uniform = g.constant(&Tensor::zeros(vec![3, 4])).unwrap();
        let l = cross_entropy_loss(uniform, &[0, 1, 3]).unwrap();
        assert!((l.scalar().unwrap() - 4f64.ln()).abs() < 1e-15);
        let sat = g.constant(&m(&[&[0.0, 1000.0, 0.0]])).unwrap();
        assert!(cross_entropy_loss(sat, &[1]).unwrap().scalar().unwrap().abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(sat, &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn causal_softmax_single_entry_is_one() {
        let g = Graph::new();
        let s = g.constant(&Tensor::scalar(-4.2)).unwrap();
        assert_eq!(s.causal_softmax().unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let g = Graph::new();
        let x = g.constant(&Tensor::scalar(1e300)).unwrap();
        assert!(matches!(x.mul(x), Err(Error::NonFinite { .. })));
    }
}
