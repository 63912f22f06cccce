//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`]; after [`Tape::backward`] the node
//! gradients stay on the tape so callers can read the gradient of any
//! intermediate value (the embedded inputs in particular) and fold the
//! parameter gradients into a [`Grads`] accumulator.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{dot, Matrix};
use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Embed { table: ParamId, ids: Vec<usize> },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Matrix>,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    embed_nodes: Vec<NodeId>,
    perturbations: Vec<Matrix>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    grads: Option<Vec<Option<Matrix>>>,
}

impl<'s> Tape<'s> {
    /// Evaluation-mode tape: dropout disabled.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            embed_nodes: Vec::new(),
            perturbations: Vec::new(),
            dropout: 0.0,
            rng: None,
            grads: None,
        }
    }

    /// Training-mode tape with inverted dropout driven by `seed`.
    pub fn training(store: &'s ParamStore, dropout: f64, seed: u64) -> Self {
        let mut t = Self::new(store);
        t.dropout = dropout;
        t.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        t
    }

    /// Additive offsets for the embedded inputs: the k-th embedding lookup on
    /// this tape receives `perturbations[k]`.
    pub fn with_perturbations(mut self, perturbations: Vec<Matrix>) -> Self {
        self.perturbations = perturbations;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Gathers rows of an embedding table. The result is an "embedded input"
    /// whose gradient can be read back with [`Tape::embedding_gradients`].
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.store.get(table);
        let d = t.cols();
        let mut out = Matrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let k = self.embed_nodes.len();
        if let Some(p) = self.perturbations.get(k) {
            assert_eq!(p.shape(), out.shape(), "perturbation shape mismatch");
            out.add_assign(p);
        }
        let n = self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
        );
        self.embed_nodes.push(n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    /// Adds a 1 x c row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), v.cols());
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// `x W + b` with `W` stored as (in x out) and `b` as (1 x out).
    pub fn linear(&mut self, x: NodeId, weight: ParamId, bias: ParamId) -> NodeId {
        let w = self.param(weight);
        let b = self.param(bias);
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(Op::Gelu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Row-wise softmax. With `causal`, entry (i, j) is masked for j > i.
    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let visible = if causal { (r + 1).min(cols) } else { cols };
            let row = &x.row(r)[..visible];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                o[j] = e;
                total += e;
            }
            for v in &mut o[..visible] {
                *v /= total;
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Inverted dropout at the tape's rate; identity in evaluation mode.
    pub fn dropout(&mut self, a: NodeId) -> NodeId {
        let p = self.dropout;
        if p <= 0.0 || self.rng.is_none() {
            return a;
        }
        let n = self.value(a).len();
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training tape");
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let x = self.value(a);
        let v = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(Op::Dropout { x: a, mask }, v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, len);
        self.push(Op::SliceRows { x: a, start }, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, len);
        self.push(Op::SliceCols { x: a, start }, v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / x.rows() as f64);
        self.push(Op::MeanRows(a), out)
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`; a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per logit row");
        let (rows, cols) = x.shape();
        let mut probs = Matrix::zeros(rows, cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Matrix::scalar(loss / rows as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
        )
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        self.push(Op::Sum(parts.to_vec()), v)
    }

    /// Nodes produced by [`Tape::embed`], in creation order.
    pub fn embedded_inputs(&self) -> &[NodeId] {
        &self.embed_nodes
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.rows(), lv.cols()));
        }
        if !lv.item().is_finite() {
            return Err(NnError::NonFiniteLoss(lv.item()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let acc = |grads: &mut [Option<Matrix>], n: NodeId, d: Matrix| match &mut grads[n.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) | Op::Embed { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.t_matmul(self.value(*a));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut dxhat = vec![0.0; cols];
                    for c in 0..cols {
                        dgain.data_mut()[c] += gr[c] * xr[c];
                        dbias.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * gv.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dot(&dxhat, xr) / cols as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                );
                acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.as_ref().expect("tanh value");
                let d = Matrix::from_vec(
                    y.rows(),
                    y.cols(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gy)| gy * (1.0 - y * y))
                        .collect(),
                );
                acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - s);
                    }
                }
                acc(grads, *a, d);
            }
            Op::Dropout { x, mask } => {
                let d = Matrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                );
                acc(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    acc(grads, p, g.slice_rows(offset, n));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    acc(grads, p, g.slice_cols(offset, n));
                    offset += n;
                }
            }
            Op::MeanRows(a) => {
                let xv = self.value(*a);
                let s = 1.0 / xv.rows() as f64;
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * s;
                    }
                }
                acc(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to any node.
    pub fn grad(&self, id: NodeId) -> Result<Matrix, NnError> {
        let grads = self.grads.as_ref().ok_or(NnError::NoBackward)?;
        let v = self.value(id);
        Ok(grads[id.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols())))
    }

    /// d loss / d (embedded input) for every embedding lookup, in creation
    /// order. Fails if no lookup was recorded or backward has not run.
    pub fn embedding_gradients(&self) -> Result<Vec<Matrix>, NnError> {
        if self.embed_nodes.is_empty() {
            return Err(NnError::NoForward);
        }
        self.embed_nodes.iter().map(|&n| self.grad(n)).collect()
    }

    /// Adds the parameter gradients of the last backward pass into `out`.
    pub fn accumulate_into(&self, out: &mut Grads) -> Result<(), NnError> {
        let grads = self.grads.as_ref().ok_or(NnError::NoBackward)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            match &node.op {
                Op::Param(p) => out.get_mut(*p).add_assign(g),
                Op::Embed { table, ids } => {
                    let t = out.get_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in t.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Matrix::zeros(3, 20));
        let l = tape.cross_entropy(x, &[0, 5, 19]);
        assert!((tape.value(l).item() - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(NnError::NonScalarLoss(2, 2))));
    }

    #[test]
    fn embedding_gradient_before_forward_is_an_error() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        assert!(matches!(tape.embedding_gradients(), Err(NnError::NoForward)));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 9.0]]));
        let y = tape.softmax(x, true);
        let v = tape.value(y);
        assert_eq!(v.get(0, 0), 1.0);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-12);
        assert_eq!(v.get(1, 2), 0.0);
    }
}
