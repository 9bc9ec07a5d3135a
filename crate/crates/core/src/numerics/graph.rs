//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every node holds a `[rows, cols]` value. Operations append to the tape in
//! creation order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass. Parameters bound through
//! [`Graph::param`] are deduplicated by name; whether they receive gradients
//! is decided by the graph's trainable predicate.

use std::collections::HashMap;
use std::sync::Arc;

use super::param::{Module, Parameter};
use super::tensor::{dot, matmul_at_acc, matmul_bt_into, matmul_into, Tensor};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Silu,
    Exp,
    Ln,
    Sqrt,
    Square,
    LogSigmoid,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Unary(NodeId, Unary),
    Softmax(NodeId),
    RmsNorm(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    MeanRows(NodeId),
    SumAll(NodeId),
    Rope(NodeId, Arc<RopeSpec>),
    Nll(NodeId, Vec<Option<usize>>),
}

/// Rotary rotation applied row by row: row `r` is rotated at `positions[r]`.
#[derive(Clone, Debug)]
pub struct RopeSpec {
    pub positions: Vec<usize>,
    pub head_dim: usize,
    pub base: f64,
}

impl RopeSpec {
    fn angles(&self, pos: usize) -> Vec<(f64, f64)> {
        let half = self.head_dim / 2;
        (0..half)
            .map(|i| {
                let theta = self.base.powf(-2.0 * i as f64 / self.head_dim as f64);
                let a = pos as f64 * theta;
                (a.cos(), a.sin())
            })
            .collect()
    }

    /// Rotate one row in place; `inverse` applies the transpose rotation.
    pub fn rotate_row(&self, row: &mut [f64], pos: usize, inverse: bool) {
        let angles = self.angles(pos);
        for head in row.chunks_mut(self.head_dim) {
            for (i, &(c, s)) in angles.iter().enumerate() {
                let s = if inverse { -s } else { s };
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

type Predicate = Box<dyn Fn(&str) -> bool>;

pub struct Graph {
    nodes: Vec<Node>,
    trainable: Predicate,
    bound: HashMap<String, NodeId>,
    trained: Vec<(String, NodeId)>,
    poisoned: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which no parameter is trainable (pure inference).
    pub fn new() -> Self {
        Self::with_trainable(|_| false)
    }

    pub fn with_trainable(pred: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            nodes: Vec::new(),
            trainable: Box::new(pred),
            bound: HashMap::new(),
            trained: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.shape()[0], v.shape()[1])
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Fails if any operation so far produced a non-finite value.
    pub fn check(&self) -> Result<(), NumericsError> {
        match &self.poisoned {
            Some(ctx) => Err(NumericsError::NonFinite(ctx.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(format!("node {} ({})", self.nodes.len(), op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn as_matrix(t: Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same element count")
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Self::as_matrix(t), Op::Leaf, false)
    }

    /// A free leaf that receives a gradient regardless of the predicate.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(Self::as_matrix(t), Op::Leaf, true)
    }

    /// Bind a parameter; repeated binds of the same name share one node.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let train = (self.trainable)(&p.name);
        let id = self.push(Self::as_matrix(p.tensor.clone()), Op::Leaf, train);
        self.bound.insert(p.name.clone(), id);
        if train {
            self.trained.push((p.name.clone(), id));
        }
        id
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMulBt(a, b), ng)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes");
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(r, c, data).unwrap(), op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn broadcast_row(&mut self, a: NodeId, row: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "row broadcast shape");
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&rv) {
                *x = f(*x, *y);
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(Tensor::matrix(r, c, data).unwrap(), op, ng)
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.broadcast_row(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `[1, c]` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.broadcast_row(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    /// Multiplies `a` by a `[1, 1]` node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "scalar node");
        let sv = self.value(s).data()[0];
        let t = self.value(a).map(|x| x * sv);
        let ng = self.ng(&[a, s]);
        self.push(t, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, k), ng)
    }

    pub fn unary(&mut self, a: NodeId, u: Unary) -> NodeId {
        let f: fn(f64) -> f64 = match u {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::LogSigmoid => log_sigmoid,
        };
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, Op::Unary(a, u), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Tanh)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Silu)
    }

    /// Row-wise softmax. With a mask, disallowed entries get probability
    /// exactly zero; a fully masked row yields all zeros.
    pub fn softmax(&mut self, a: NodeId, mask: Option<Arc<Vec<bool>>>) -> NodeId {
        let (r, c) = self.shape(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "mask size");
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            softmax_row_masked(row, allowed);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(r, c, data).unwrap(), Op::Softmax(a), ng)
    }

    /// `x / sqrt(mean(x²) + eps)` per row, without gain.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(r, c, data).unwrap(), Op::RmsNorm(a, eps), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::matrix(rows, c, data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, r, "concat_cols height");
                self.shape(p).1
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::matrix(r, c, data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, _) = self.shape(a);
        assert!(start + len <= r, "slice_rows bounds");
        let t = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(t, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols bounds");
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(r, len, data).unwrap(), Op::SliceCols(a, start), ng)
    }

    /// Output row `i` is row `idx[i]` of `a` (embedding lookup, selection).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {} out of {} rows", i, r);
            data.extend_from_slice(v.row_slice(i));
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(idx.len(), c, data).unwrap(),
            Op::Gather(a, idx.to_vec()),
            ng,
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        let m = self.value(a).mean_rows();
        let ng = self.ng(&[a]);
        self.push(m.reshape(vec![1, c]).unwrap(), Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn rope(&mut self, a: NodeId, spec: Arc<RopeSpec>) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(spec.positions.len(), r, "rope positions");
        assert_eq!(c % spec.head_dim, 0, "rope head dim");
        let mut t = self.value(a).clone();
        for (i, &pos) in spec.positions.iter().enumerate() {
            spec.rotate_row(t.row_slice_mut(i), pos, false);
        }
        let ng = self.ng(&[a]);
        self.push(t, Op::Rope(a, spec), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; rows with `None` are skipped.
    pub fn nll(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let r = self.shape(logits).0;
        assert_eq!(targets.len(), r, "nll targets");
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = v.row_slice(i);
                total += log_sum_exp(row) - row[t];
            }
        }
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(total), Op::Nll(logits, targets.to_vec()), ng)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        self.check()?;
        if self.shape(loss) != (1, 1) {
            return Err(NumericsError::Shape("backward needs a scalar loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1, 1], 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.trained.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let v = &self.nodes[id.0].value;
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(v.shape()));
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.acc_with(grads, *a, |ga| {
                    let mut tmp = vec![0.0; m * k];
                    matmul_bt_into(gd, bv, &mut tmp, m, n, k);
                    ga.data_mut().iter_mut().zip(tmp).for_each(|(x, t)| *x += t);
                });
                self.acc_with(grads, *b, |gb| matmul_at_acc(av, gd, gb.data_mut(), m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                self.acc_with(grads, *a, |ga| {
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(gd, bv, &mut tmp, m, n, k);
                    ga.data_mut().iter_mut().zip(tmp).for_each(|(x, t)| *x += t);
                });
                self.acc_with(grads, *b, |gb| matmul_at_acc(gd, av, gb.data_mut(), m, n, k));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, zip_map(g, bv, |gi, bi| gi * bi));
                self.acc(grads, *b, zip_map(g, av, |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, zip_map(g, bv, |gi, bi| gi / bi));
                let gb: Vec<f64> = gd
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                    .collect();
                self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *row, |gr| {
                    let c = gr.len();
                    for chunk in gd.chunks(c) {
                        gr.data_mut().iter_mut().zip(chunk).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row).data();
                let c = rv.len();
                self.acc_with(grads, *a, |ga| {
                    for (gchunk, gachunk) in gd.chunks(c).zip(ga.data_mut().chunks_mut(c)) {
                        for ((x, gi), ri) in gachunk.iter_mut().zip(gchunk).zip(rv) {
                            *x += gi * ri;
                        }
                    }
                });
                self.acc_with(grads, *row, |gr| {
                    for (gchunk, achunk) in gd.chunks(c).zip(av.data().chunks(c)) {
                        for ((x, gi), ai) in gr.data_mut().iter_mut().zip(gchunk).zip(achunk) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                self.acc(grads, *a, g.map(|x| x * sv));
                let ds = dot(gd, self.value(*a).data());
                self.acc(grads, *s, Tensor::full(&[1, 1], ds));
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.map(|x| x * k)),
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((gi, &xi), &yi)| {
                        gi * match u {
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s * (1.0 + xi * (1.0 - s))
                            }
                            Unary::Exp => yi,
                            Unary::Ln => 1.0 / xi,
                            Unary::Sqrt => 0.5 / yi,
                            Unary::Square => 2.0 * xi,
                            Unary::LogSigmoid => sigmoid(-xi),
                        }
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = dot(yr, gr);
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - s);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::RmsNorm(a, eps) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (((xr, yr), gr), dr) in x
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gd.chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let proj = dot(gr, yr) / c as f64;
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gi - yi * proj);
                    }
                }
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    self.acc(grads, p, g.slice_rows(offset, r));
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(&gd[i * c + offset..i * c + offset + w]);
                    }
                    self.acc(grads, p, Tensor::matrix(r, w, data).unwrap());
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = y.cols();
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    let dst = &mut ga.data_mut()[start * c..start * c + gd.len()];
                    dst.iter_mut().zip(gd).for_each(|(x, v)| *x += v);
                });
            }
            Op::SliceCols(a, start) => {
                let (r, w) = (y.rows(), y.cols());
                let c = self.shape(*a).1;
                let start = *start;
                self.acc_with(grads, *a, |ga| {
                    for i in 0..r {
                        let dst = &mut ga.data_mut()[i * c + start..i * c + start + w];
                        dst.iter_mut().zip(&gd[i * w..(i + 1) * w]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = y.cols();
                self.acc_with(grads, *a, |ga| {
                    for (i, &src) in idx.iter().enumerate() {
                        let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                        dst.iter_mut().zip(&gd[i * c..(i + 1) * c]).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / r as f64;
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend(gd.iter().map(|v| v * inv));
                }
                self.acc(grads, *a, Tensor::matrix(r, c, data).unwrap());
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Tensor::full(&[r, c], gd[0]));
            }
            Op::Rope(a, spec) => {
                let mut t = g.clone();
                for (i, &pos) in spec.positions.iter().enumerate() {
                    spec.rotate_row(t.row_slice_mut(i), pos, true);
                }
                self.acc(grads, *a, t);
            }
            Op::Nll(logits, targets) => {
                let v = self.value(*logits);
                let c = v.cols();
                let mut dx = vec![0.0; v.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = v.row_slice(i);
                        let lse = log_sum_exp(row);
                        for (j, d) in dx[i * c..(i + 1) * c].iter_mut().enumerate() {
                            *d = gd[0] * ((row[j] - lse).exp() - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                self.acc(grads, *logits, Tensor::new(v.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulScalar(..) => "mul_scalar",
        Op::Scale(..) => "scale",
        Op::Unary(..) => "unary",
        Op::Softmax(_) => "softmax",
        Op::RmsNorm(..) => "rms_norm",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Gather(..) => "gather",
        Op::MeanRows(..) => "mean_rows",
        Op::SumAll(..) => "sum",
        Op::Rope(..) => "rope",
        Op::Nll(..) => "nll",
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// In-place max-subtracted softmax over the allowed entries of `row`.
pub fn softmax_row_masked(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut m = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut s = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - m).exp();
            s += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradients of every trainable parameter bound in the graph.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params
            .iter()
            .map(|(name, id)| (name.as_str(), self.grads[id.0].as_ref()))
    }

    /// Adds parameter gradients into the matching `Parameter::grad` slots.
    pub fn accumulate_into<M: Module + ?Sized>(&self, module: &mut M) {
        let by_name: HashMap<&str, &Tensor> = self
            .params()
            .filter_map(|(n, g)| g.map(|g| (n, g)))
            .collect();
        module.visit_mut(&mut |p: &mut Parameter| {
            if let Some(g) = by_name.get(p.name.as_str()) {
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(x, v)| *x += v);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, r: usize, c: usize, data: Vec<f64>) -> NodeId {
        g.variable(Tensor::matrix(r, c, data).unwrap())
    }

    #[test]
    fn matmul_gradient_by_hand() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 2, vec![1.0, 2.0]);
        let b = leaf(&mut g, 2, 1, vec![3.0, 4.0]);
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 3, vec![1.0, 5.0, 1.0]);
        let s = g.softmax(a, Some(Arc::new(vec![true, false, true])));
        assert_eq!(g.value(s).data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn non_finite_poisons_graph() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 1, vec![-1.0]);
        let _ = g.unary(a, Unary::Ln);
        assert!(matches!(g.check(), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn rope_is_norm_preserving_and_invertible() {
        let spec = RopeSpec {
            positions: vec![7],
            head_dim: 4,
            base: 10000.0,
        };
        let orig = vec![0.3, -1.2, 0.8, 2.0, 1.0, 0.0, -0.5, 0.25];
        let mut row = orig.clone();
        spec.rotate_row(&mut row, 7, false);
        let n0: f64 = orig.iter().map(|v| v * v).sum();
        let n1: f64 = row.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
        spec.rotate_row(&mut row, 7, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
