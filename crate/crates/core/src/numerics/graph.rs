//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends one node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is already in topological order and
//! the reverse pass is a single backward sweep.
//!
//! Besides the usual dense ops, the tape has a handful of geometric kernels
//! (`channel_mix`, `point_mean`, `row_norms`, `equivariant_clip`) that act on
//! `[.., n]` arrays of coordinate vectors. They keep the model code short and
//! the tape small.

use std::sync::Arc;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Keys whose norm falls below this are treated as absent by `equivariant_clip`.
pub const ZERO_KEY_NORM: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>, usize),
    SliceCol(Var, usize),
    BroadcastMul(Var, Var),
    BroadcastAdd(Var, Var),
    ChannelMix(Var, Var),
    PointMean(Var),
    OffsetPoints(Var, Var, f64),
    RowNorms(Var),
    SoftmaxRows(Var, f64),
    EquivariantClip(Var, Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record. Single-writer: build, then call [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a reverse pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Overwrite a leaf value. Dependent nodes keep stale values until [`Graph::replay`].
    pub fn set_leaf(&mut self, v: Var, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::dim(format!(
                "leaf shape {:?} cannot take {:?}",
                node.value.shape(),
                t.shape()
            )));
        }
        node.value = t;
        Ok(())
    }

    /// Recompute every non-leaf node in tape order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Smallest distance of any recorded non-smooth point from its kink:
    /// ReLU pre-activations and the query-key cosines of
    /// `equivariant_clip`. Used to reject finite-difference probes that
    /// straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::EquivariantClip(q, k) => {
                    let n = self.value(*q).trailing();
                    let qs = self.value(*q).data().chunks_exact(n);
                    for (qr, kr) in qs.zip(self.value(*k).data().chunks_exact(n)) {
                        let s: f64 = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
                        let qn = qr.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let kn = kr.iter().map(|a| a * a).sum::<f64>().sqrt();
                        if kn >= ZERO_KEY_NORM && qn > 0.0 {
                            margin = margin.min((s / (qn * kn)).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::BroadcastMul(a, b)
            | Op::BroadcastAdd(a, b)
            | Op::ChannelMix(a, b)
            | Op::OffsetPoints(a, b, _)
            | Op::EquivariantClip(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _)
            | Op::SliceCol(a, _)
            | Op::PointMean(a)
            | Op::RowNorms(a)
            | Op::SoftmaxRows(a, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }

    // ---- public op constructors ------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `a[.., q] + bias[q]`, broadcast over leading axes.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = self.value(a).clone().reshape(shape)?;
        let requires_grad = self.requires_grad(a);
        Ok(self.push_node(value, Op::Reshape(a), requires_grad))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// `out[p] = a[index[p]]` over the rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        self.push(Op::GatherRows(a, index))
    }

    /// `out[index[p]] += a[p]`, producing `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        self.push(Op::ScatterRows(a, index, rows))
    }

    /// Column `k` of a `[B, K]` matrix as a `[B]` vector.
    pub fn slice_col(&mut self, a: Var, k: usize) -> Result<Var> {
        self.push(Op::SliceCol(a, k))
    }

    /// `out[.., j] = s[..] * x[.., j]` where `x.shape == s.shape ++ [m]`.
    pub fn broadcast_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.push(Op::BroadcastMul(s, x))
    }

    /// `out[.., j] = s[..] + x[.., j]` where `x.shape == s.shape ++ [m]`.
    pub fn broadcast_add(&mut self, s: Var, x: Var) -> Result<Var> {
        self.push(Op::BroadcastAdd(s, x))
    }

    /// Linear map over the channel axis: `w[C', C]` applied to `x[B, C, n]`
    /// gives `out[b] = w · x[b]`, shape `[B, C', n]`.
    pub fn channel_mix(&mut self, w: Var, x: Var) -> Result<Var> {
        self.push(Op::ChannelMix(w, x))
    }

    /// Mean of all `n`-vectors stored in `x[.., n]`; shape `[n]`.
    pub fn point_mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::PointMean(x))
    }

    /// `x[.., :] + v`.
    pub fn add_point(&mut self, x: Var, v: Var) -> Result<Var> {
        self.push(Op::OffsetPoints(x, v, 1.0))
    }

    /// `x[.., :] - v`.
    pub fn sub_point(&mut self, x: Var, v: Var) -> Result<Var> {
        self.push(Op::OffsetPoints(x, v, -1.0))
    }

    /// Euclidean norm over the last axis.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowNorms(x))
    }

    /// Row-wise `softmax(x / tau)` of a `[B, K]` matrix.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::param(format!("temperature must be > 0, got {tau}")));
        }
        self.push(Op::SoftmaxRows(x, tau))
    }

    /// Per `n`-vector pair `(q, k)`: `q` if `<q, k> >= 0` (or `k` is ~zero),
    /// otherwise `q` with its component along `k` removed.
    pub fn equivariant_clip(&mut self, q: Var, k: Var) -> Result<Var> {
        self.push(Op::EquivariantClip(q, k))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    // ---- forward ---------------------------------------------------------

    fn compute(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => val(a).matmul(val(b)),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (val(a), val(b));
                same_shape(x, y, "elementwise op")?;
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::AddBias(a, b) => {
                let (x, bias) = (val(a), val(b));
                let q = x.trailing();
                if bias.shape() != [q] {
                    return Err(Error::dim(format!(
                        "bias {:?} does not match trailing axis of {:?}",
                        bias.shape(),
                        x.shape()
                    )));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(q.max(1)) {
                    for (o, &b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            Op::Scale(a, f) => Ok(val(a).map(|x| x * f)),
            Op::Relu(a) => Ok(val(a).map(|x| x.max(0.0))),
            Op::Reshape(_) => unreachable!("reshape values are produced at record time"),
            Op::ConcatCols(parts) => {
                let first = val(parts.first().ok_or_else(|| Error::dim("empty concat"))?);
                let (rows, _) = first.as_matrix()?;
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = val(p).as_matrix()?;
                    if r != rows {
                        return Err(Error::dim(format!(
                            "concat row mismatch: {:?} vs {:?}",
                            first.shape(),
                            val(p).shape()
                        )));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&val(p).data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::new(vec![rows, total], out)
            }
            Op::GatherRows(a, index) => {
                let x = val(a);
                let (rows, q) = x.as_matrix()?;
                let mut out = Vec::with_capacity(index.len() * q);
                for &i in index.iter() {
                    if i >= rows {
                        return Err(Error::dim(format!("gather index {i} out of {rows} rows")));
                    }
                    out.extend_from_slice(&x.data()[i * q..(i + 1) * q]);
                }
                Tensor::new(vec![index.len(), q], out)
            }
            Op::ScatterRows(a, index, rows) => {
                let x = val(a);
                let (p, q) = x.as_matrix()?;
                if p != index.len() {
                    return Err(Error::dim(format!(
                        "scatter of {p} rows with {} indices",
                        index.len()
                    )));
                }
                let mut out = vec![0.0; rows * q];
                for (src, &i) in x.data().chunks_exact(q.max(1)).zip(index.iter()) {
                    if i >= *rows {
                        return Err(Error::dim(format!("scatter index {i} out of {rows} rows")));
                    }
                    for (o, &s) in out[i * q..(i + 1) * q].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                Tensor::new(vec![*rows, q], out)
            }
            Op::SliceCol(a, k) => {
                let x = val(a);
                let (b, kk) = x.as_matrix()?;
                if *k >= kk {
                    return Err(Error::dim(format!("column {k} out of {kk}")));
                }
                Tensor::new(vec![b], (0..b).map(|r| x.data()[r * kk + k]).collect())
            }
            Op::BroadcastMul(s, x) | Op::BroadcastAdd(s, x) => {
                let (s, x) = (val(s), val(x));
                let m = broadcast_width(s, x)?;
                let mul = matches!(op, Op::BroadcastMul(..));
                let mut out = x.clone();
                if m > 0 {
                    for (row, &f) in out.data_mut().chunks_exact_mut(m).zip(s.data()) {
                        for o in row {
                            *o = if mul { *o * f } else { *o + f };
                        }
                    }
                }
                Ok(out)
            }
            Op::ChannelMix(w, x) => {
                let (w, x) = (val(w), val(x));
                let (c_out, c_in, b, n) = channel_mix_dims(w, x)?;
                let mut out = vec![0.0; b * c_out * n];
                for (xb, ob) in x.data().chunks_exact((c_in * n).max(1)).zip(out.chunks_exact_mut((c_out * n).max(1))) {
                    gemm_nn(w.data(), xb, ob, c_out, c_in, n);
                }
                Tensor::new(vec![b, c_out, n], out)
            }
            Op::PointMean(a) => {
                let x = val(a);
                let n = x.trailing();
                let rows = if n == 0 { 0 } else { x.len() / n };
                if rows == 0 {
                    return Err(Error::dim(format!("mean of empty point set {:?}", x.shape())));
                }
                let mut mean = vec![0.0; n];
                for row in x.data().chunks_exact(n) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                Tensor::new(vec![n], mean)
            }
            Op::OffsetPoints(a, v, sign) => {
                let (x, v) = (val(a), val(v));
                let n = x.trailing();
                if v.shape() != [n] {
                    return Err(Error::dim(format!(
                        "point offset {:?} does not match {:?}",
                        v.shape(),
                        x.shape()
                    )));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(n.max(1)) {
                    for (o, &p) in row.iter_mut().zip(v.data()) {
                        *o += sign * p;
                    }
                }
                Ok(out)
            }
            Op::RowNorms(a) => {
                let x = val(a);
                let n = x.trailing();
                let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
                let data = x
                    .data()
                    .chunks_exact(n.max(1))
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Tensor::new(shape, data)
            }
            Op::SoftmaxRows(a, tau) => {
                let x = val(a);
                let (_, k) = x.as_matrix()?;
                let mut out = x.clone();
                if k > 0 {
                    for (o, l) in out.data_mut().chunks_exact_mut(k).zip(x.data().chunks_exact(k)) {
                        softmax_into(l, *tau, o);
                    }
                }
                Ok(out)
            }
            Op::EquivariantClip(q, k) => {
                let (q, k) = (val(q), val(k));
                same_shape(q, k, "equivariant clip")?;
                let n = q.trailing();
                let mut out = q.clone();
                if n > 0 {
                    for (o, kr) in out.data_mut().chunks_exact_mut(n).zip(k.data().chunks_exact(n)) {
                        let s: f64 = o.iter().zip(kr).map(|(a, b)| a * b).sum();
                        let r: f64 = kr.iter().map(|b| b * b).sum();
                        if s < 0.0 && r.sqrt() >= ZERO_KEY_NORM {
                            for (oi, &ki) in o.iter_mut().zip(kr) {
                                *oi -= s / r * ki;
                            }
                        }
                    }
                }
                Ok(out)
            }
            Op::Sum(a) => Ok(Tensor::scalar(val(a).sum())),
        }
    }

    // ---- reverse ---------------------------------------------------------

    /// Reverse pass from a scalar. Leaves that do not influence `loss` get no
    /// entry; [`Gradients::wrt`] reports zeros for them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = val(a).as_matrix().expect("checked in forward");
                let r = val(b).shape()[1];
                self.accumulate(grads, *a, |da| gemm_nt(gd, val(b).data(), da, p, r, q));
                self.accumulate(grads, *b, |db| gemm_tn(val(a).data(), gd, db, p, q, r));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(a).data(), val(b).data());
                self.accumulate(grads, *a, |d| {
                    for ((di, &gi), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *di += gi * yi;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((di, &gi), &xi) in d.iter_mut().zip(gd).zip(x) {
                        *di += gi * xi;
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                let q = val(b).len();
                self.accumulate(grads, *b, |d| {
                    if q > 0 {
                        for row in gd.chunks_exact(q) {
                            axpy(d, row, 1.0);
                        }
                    }
                });
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |d| axpy(d, gd, *f)),
            Op::Relu(a) => {
                let x = val(a).data();
                self.accumulate(grads, *a, |d| {
                    for ((di, &gi), &xi) in d.iter_mut().zip(gd).zip(x) {
                        if xi > 0.0 {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| axpy(d, gd, 1.0)),
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = val(p).shape()[1];
                    self.accumulate(grads, *p, |d| {
                        for r in 0..rows {
                            axpy(
                                &mut d[r * w..(r + 1) * w],
                                &gd[r * total + col..r * total + col + w],
                                1.0,
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows(a, index) => {
                let q = out.trailing();
                self.accumulate(grads, *a, |d| {
                    for (p, &i) in index.iter().enumerate() {
                        axpy(&mut d[i * q..(i + 1) * q], &gd[p * q..(p + 1) * q], 1.0);
                    }
                });
            }
            Op::ScatterRows(a, index, _) => {
                let q = out.trailing();
                self.accumulate(grads, *a, |d| {
                    for (p, &i) in index.iter().enumerate() {
                        axpy(&mut d[p * q..(p + 1) * q], &gd[i * q..(i + 1) * q], 1.0);
                    }
                });
            }
            Op::SliceCol(a, k) => {
                let kk = val(a).shape()[1];
                self.accumulate(grads, *a, |d| {
                    for (r, &gi) in gd.iter().enumerate() {
                        d[r * kk + k] += gi;
                    }
                });
            }
            Op::BroadcastMul(s, x) => {
                let (sv, xv) = (val(s).data(), val(x).data());
                let m = if sv.is_empty() { 0 } else { xv.len() / sv.len() };
                if m == 0 {
                    return;
                }
                self.accumulate(grads, *s, |d| {
                    for ((di, gr), xr) in d.iter_mut().zip(gd.chunks_exact(m)).zip(xv.chunks_exact(m)) {
                        *di += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate(grads, *x, |d| {
                    for ((dr, gr), &f) in d.chunks_exact_mut(m).zip(gd.chunks_exact(m)).zip(sv) {
                        axpy(dr, gr, f);
                    }
                });
            }
            Op::BroadcastAdd(s, x) => {
                let m = if val(s).is_empty() { 0 } else { val(x).len() / val(s).len() };
                if m == 0 {
                    return;
                }
                self.accumulate(grads, *s, |d| {
                    for (di, gr) in d.iter_mut().zip(gd.chunks_exact(m)) {
                        *di += gr.iter().sum::<f64>();
                    }
                });
                self.accumulate(grads, *x, |d| axpy(d, gd, 1.0));
            }
            Op::ChannelMix(w, x) => {
                let (c_out, c_in, _, n) = channel_mix_dims(val(w), val(x)).expect("checked in forward");
                let (wd, xd) = (val(w).data(), val(x).data());
                if c_in * n == 0 || c_out * n == 0 {
                    return;
                }
                self.accumulate(grads, *w, |dw| {
                    for (xb, gb) in xd.chunks_exact(c_in * n).zip(gd.chunks_exact(c_out * n)) {
                        gemm_nt(gb, xb, dw, c_out, n, c_in);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for (dxb, gb) in dx.chunks_exact_mut(c_in * n).zip(gd.chunks_exact(c_out * n)) {
                        gemm_tn(wd, gb, dxb, c_out, c_in, n);
                    }
                });
            }
            Op::PointMean(a) => {
                let n = out.len();
                let rows = val(a).len() / n;
                let inv = 1.0 / rows as f64;
                self.accumulate(grads, *a, |d| {
                    for row in d.chunks_exact_mut(n) {
                        axpy(row, gd, inv);
                    }
                });
            }
            Op::OffsetPoints(a, v, sign) => {
                let n = out.trailing();
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *v, |d| {
                    if n > 0 {
                        for row in gd.chunks_exact(n) {
                            axpy(d, row, *sign);
                        }
                    }
                });
            }
            Op::RowNorms(a) => {
                let x = val(a).data();
                let n = val(a).trailing();
                if n == 0 {
                    return;
                }
                self.accumulate(grads, *a, |d| {
                    for (((dr, xr), &norm), &gi) in d
                        .chunks_exact_mut(n)
                        .zip(x.chunks_exact(n))
                        .zip(out.data())
                        .zip(gd)
                    {
                        if norm > 0.0 {
                            axpy(dr, xr, gi / norm);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a, tau) => {
                let k = out.trailing();
                if k == 0 {
                    return;
                }
                self.accumulate(grads, *a, |d| {
                    for ((dr, yr), gr) in d.chunks_exact_mut(k).zip(out.data().chunks_exact(k)).zip(gd.chunks_exact(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((di, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *di += yi * (gi - dot) / tau;
                        }
                    }
                });
            }
            Op::EquivariantClip(q, k) => {
                let n = out.trailing();
                if n == 0 {
                    return;
                }
                let (qd, kd) = (val(q).data(), val(k).data());
                // Per row: (s, r, <g, k>) and whether the projection branch fired.
                let rows: Vec<(bool, f64, f64, f64)> = qd
                    .chunks_exact(n)
                    .zip(kd.chunks_exact(n))
                    .zip(gd.chunks_exact(n))
                    .map(|((qr, kr), gr)| {
                        let s: f64 = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
                        let r: f64 = kr.iter().map(|b| b * b).sum();
                        let gk: f64 = gr.iter().zip(kr).map(|(a, b)| a * b).sum();
                        (s < 0.0 && r.sqrt() >= ZERO_KEY_NORM, s, r, gk)
                    })
                    .collect();
                self.accumulate(grads, *q, |d| {
                    for (((dr, gr), kr), &(proj, _, r, gk)) in d
                        .chunks_exact_mut(n)
                        .zip(gd.chunks_exact(n))
                        .zip(kd.chunks_exact(n))
                        .zip(&rows)
                    {
                        axpy(dr, gr, 1.0);
                        if proj {
                            axpy(dr, kr, -gk / r);
                        }
                    }
                });
                self.accumulate(grads, *k, |d| {
                    for ((((dr, gr), kr), qr), &(proj, s, r, gk)) in d
                        .chunks_exact_mut(n)
                        .zip(gd.chunks_exact(n))
                        .zip(kd.chunks_exact(n))
                        .zip(qd.chunks_exact(n))
                        .zip(&rows)
                    {
                        if proj {
                            // out = q - (s / r) k with s = <q, k>, r = <k, k>
                            axpy(dr, qr, -gk / r);
                            axpy(dr, gr, -s / r);
                            axpy(dr, kr, 2.0 * s * gk / (r * r));
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn broadcast_width(s: &Tensor, x: &Tensor) -> Result<usize> {
    let ok = x.rank() == s.rank() + 1 && x.shape()[..s.rank()] == *s.shape();
    if !ok {
        return Err(Error::dim(format!(
            "cannot broadcast {:?} against {:?}",
            s.shape(),
            x.shape()
        )));
    }
    Ok(x.trailing())
}

fn channel_mix_dims(w: &Tensor, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_out, c_in) = w.as_matrix()?;
    match x.shape() {
        &[b, c, n] if c == c_in => Ok((c_out, c_in, b, n)),
        s => Err(Error::dim(format!(
            "channel mix of {:?} with features {:?}",
            w.shape(),
            s
        ))),
    }
}
