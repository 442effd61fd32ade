//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already exist, so node order is a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, moments, softmax_in_place};
use super::real::{gemm, MatView, MatViewMut};
use super::{NumericsError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBias(NodeId, NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, rstd: Vec<T> },
    Gelu(NodeId),
    Softmax(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ConcatRows(NodeId, NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass; not shared across threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let requires_grad = value.requires_grad;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value.with_grad())
    }

    pub fn constant(&mut self, mut value: Tensor<T>) -> NodeId {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, NumericsError> {
        self.nodes.get(id.0).ok_or(NumericsError::UnknownNode(id.0))
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<(), NumericsError> {
        for id in ids {
            self.node(*id)?;
        }
        Ok(())
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<(), NumericsError> {
        self.check_ids(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[a, b])?;
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, NumericsError> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, NumericsError> {
        self.check_ids(&[a])?;
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * factor).collect())?;
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x, bias])?;
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(NumericsError::Shape(format!("add_bias {:?} + {:?}", vx.shape(), vb.shape())));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Row-wise layer normalisation.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x, gamma, beta])?;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        if vg.len() != c || vb.len() != c {
            return Err(NumericsError::Shape(format!("layer_norm {:?} gamma {:?}", vx.shape(), vg.shape())));
        }
        let rows = vx.rows();
        let (mut mean, mut rstd) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = vx.row(r);
            let (m, s) = moments(row, eps);
            mean.push(m);
            rstd.push(s);
            for ((&v, &g), &b) in row.iter().zip(vg.data()).zip(vb.data()) {
                out.push((v - m) * s * g + b);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.gelu()).collect())?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention; projections are the caller's.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId, NumericsError> {
        self.check_ids(&[q, k, v])?;
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), heads)?;
        self.push("attention", out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        if idx.is_empty() {
            return Err(NumericsError::Shape("gather_rows with no indices".into()));
        }
        let out = self.value(x).gather_rows(idx)?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(NumericsError::Shape(format!("concat_rows {:?} {:?}", va.shape(), vb.shape())));
        }
        let rows = va.rows() + vb.rows();
        let out = Tensor::matrix(rows, va.cols(), [va.data(), vb.data()].concat())?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Mean over rows, producing a `1 x cols` matrix.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        let mut out = vec![T::zero(); c];
        for r in 0..rows {
            for (o, &a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        let n = T::from_usize(rows).unwrap();
        out.iter_mut().for_each(|o| *o = *o / n);
        let out = Tensor::matrix(1, c, out)?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.check_ids(&[x])?;
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        self.push("mean", out, Op::MeanAll(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NumericsError> {
        self.check_ids(&[logits])?;
        let v = self.value(logits);
        let (rows, c) = (v.rows(), v.cols());
        if labels.len() != rows {
            return Err(NumericsError::Shape(format!("cross_entropy: {} labels for {rows} rows", labels.len())));
        }
        let mut probs = v.data().to_vec();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(NumericsError::Index { index: label, len: c });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            softmax_in_place(row);
            // log-sum-exp form keeps the loss finite when the probability underflows
            let logits_row = v.row(r);
            let max = logits_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logits_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += lse - logits_row[label];
        }
        let out = Tensor::scalar(loss / T::from_usize(rows).unwrap());
        self.push("cross_entropy", out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Reverse sweep from a scalar node. Returns gradients for every node
    /// that requires them and is reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(NumericsError::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else { continue };
            self.backprop_node(node, &dout, &mut grads)?;
            grads[idx] = Some(dout);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(data) if node.requires_grad => {
                        let t = Tensor::new(node.value.shape().to_vec(), data)?;
                        t.ensure_finite("backward")?;
                        Ok(Some(t))
                    }
                    _ => Ok(None),
                }
            })
            .collect::<Result<Vec<_>, NumericsError>>()?;
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut Vec<T> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(
                        T::one(),
                        MatView::row_major(dout, m, n),
                        MatView::row_major(vb.data(), k, n).t(),
                        T::one(),
                        MatViewMut::row_major(ga, m, k),
                    );
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(
                        T::one(),
                        MatView::row_major(va.data(), m, k).t(),
                        MatView::row_major(dout, m, n),
                        T::one(),
                        MatViewMut::row_major(gb, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        self.slot(grads, id).iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                }
                if self.wants(*b) {
                    self.slot(grads, *b).iter_mut().zip(dout).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for i in 0..dout.len() {
                        ga[i] += dout[i] * vb[i];
                    }
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    for i in 0..dout.len() {
                        gb[i] += dout[i] * va[i];
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(dout).for_each(|(g, &d)| *g += d * *factor);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    self.slot(grads, *x).iter_mut().zip(dout).for_each(|(g, &d)| *g += d);
                }
                if self.wants(*bias) {
                    let gb = self.slot(grads, *bias);
                    let c = gb.len();
                    for row in dout.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma).data();
                let c = vx.cols();
                let cn = T::from_usize(c).unwrap();
                let mut dx_all = vec![T::zero(); if self.wants(*x) { vx.len() } else { 0 }];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for r in 0..vx.rows() {
                    let row = vx.row(r);
                    let dy = &dout[r * c..(r + 1) * c];
                    for i in 0..c {
                        xhat[i] = (row[i] - mean[r]) * rstd[r];
                        dxhat[i] = dy[i] * vg[i];
                        dg[i] += dy[i] * xhat[i];
                        db[i] += dy[i];
                    }
                    if !dx_all.is_empty() {
                        let m1 = dxhat.iter().copied().sum::<T>() / cn;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        for i in 0..c {
                            dx_all[r * c + i] = rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if self.wants(*x) {
                    self.slot(grads, *x).iter_mut().zip(&dx_all).for_each(|(g, &d)| *g += d);
                }
                if self.wants(*gamma) {
                    self.slot(grads, *gamma).iter_mut().zip(&dg).for_each(|(g, &d)| *g += d);
                }
                if self.wants(*beta) {
                    self.slot(grads, *beta).iter_mut().zip(&db).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x).data();
                    let gx = self.slot(grads, *x);
                    for i in 0..dout.len() {
                        gx[i] += dout[i] * vx[i].gelu_grad();
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let c = y.cols();
                    let gx = self.slot(grads, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dy = &dout[r * c..(r + 1) * c];
                        let dot: T = yr.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                        for i in 0..c {
                            gx[r * c + i] += yr[i] * (dy[i] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, dout, grads)?;
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let gx = self.slot(grads, *x);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut gx[src * c..(src + 1) * c];
                        dst.iter_mut().zip(&dout[r * c..(r + 1) * c]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(&dout[..split]).for_each(|(g, &d)| *g += d);
                }
                if self.wants(*b) {
                    self.slot(grads, *b).iter_mut().zip(&dout[split..]).for_each(|(g, &d)| *g += d);
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x);
                    let (rows, c) = (vx.rows(), vx.cols());
                    let n = T::from_usize(rows).unwrap();
                    let gx = self.slot(grads, *x);
                    for r in 0..rows {
                        for i in 0..c {
                            gx[r * c + i] += dout[i] / n;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    self.slot(grads, *x).iter_mut().for_each(|g| *g += dout[0]);
                }
            }
            Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = T::from_usize(self.value(*x).len()).unwrap();
                    self.slot(grads, *x).iter_mut().for_each(|g| *g += dout[0] / n);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let n = T::from_usize(labels.len()).unwrap();
                    let gl = self.slot(grads, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for i in 0..c {
                            let target = if i == label { T::one() } else { T::zero() };
                            gl[r * c + i] += dout[0] * (probs[r * c + i] - target) / n;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        dout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<(), NumericsError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (vq.rows(), vk.rows(), vq.cols());
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            let dout_h = MatView::col_block(dout, lq, d, h * dh, dh);
            gemm(
                T::one(),
                dout_h,
                MatView::col_block(vv.data(), lk, d, h * dh, dh).t(),
                T::zero(),
                MatViewMut::row_major(&mut dp, lq, lk),
            );
            gemm(
                T::one(),
                MatView::row_major(p, lq, lk).t(),
                dout_h,
                T::zero(),
                MatViewMut::col_block(&mut dv, lk, d, h * dh, dh),
            );
            for r in 0..lq {
                let pr = &p[r * lk..(r + 1) * lk];
                let dpr = &mut dp[r * lk..(r + 1) * lk];
                let dot: T = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                for i in 0..lk {
                    dpr[i] = pr[i] * (dpr[i] - dot);
                }
            }
            gemm(
                scale,
                MatView::row_major(&dp, lq, lk),
                MatView::col_block(vk.data(), lk, d, h * dh, dh),
                T::zero(),
                MatViewMut::col_block(&mut dq, lq, d, h * dh, dh),
            );
            gemm(
                scale,
                MatView::row_major(&dp, lq, lk).t(),
                MatView::col_block(vq.data(), lq, d, h * dh, dh),
                T::zero(),
                MatViewMut::col_block(&mut dk, lk, d, h * dh, dh),
            );
        }
        for (id, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(id) {
                self.slot(grads, id).iter_mut().zip(&g).for_each(|(s, &x)| *s += x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_norm_gives_twice_x() {
        let mut g = Graph::<f64>::new();
        let data = [1.0, -2.0, 3.5];
        let x = g.param(Tensor::from_f64(&[3], &data).unwrap());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let got = grads.get(x).unwrap().data();
        for i in 0..3 {
            assert_eq!(got[i], 2.0 * data[i]);
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(NumericsError::NotScalar(_))));
        assert!(matches!(g.backward(NodeId(99)), Err(NumericsError::UnknownNode(99))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[f64::MAX]).unwrap());
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { op: "scale", .. }));
    }

    #[test]
    fn topological_order_holds() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[1]));
        let b = g.add(a, a).unwrap();
        assert!(b > a);
        assert_eq!(g.len(), 2);
    }
}
