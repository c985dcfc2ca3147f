use std::cell::{Ref, RefCell};

use super::{axis_extents, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    // The right operand may be broadcast over the leading dims of the left.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    Narrow(Var, usize),
    Reshape(Var),
    Relu(Var),
    MaxAxis { src: Var, argmax: Vec<usize> },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    ChannelNorm { src: Var, inv_std: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a dynamic computation graph for one forward pass.
///
/// A tape is confined to one thread; independent samples use independent
/// tapes.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` participates in it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, shape, &[axis]));
    }
    Ok(())
}

// True when `rhs` equals `lhs` or is a suffix of it.
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// Sums a gradient of the broadcast output back down to the rhs shape.
fn reduce_broadcast<T: Real>(grad: &[T], rhs_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rhs_len];
    for chunk in grad.chunks_exact(rhs_len) {
        add_into(&mut out, chunk);
    }
    out
}

fn softmax_lane<T: Real>(src: &[T], dst: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(src[at(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (src[at(a)] - max).exp();
                dst[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                dst[at(a)] = dst[at(a)] / total;
            }
        }
    }
}

fn log_softmax_lane<T: Real>(src: &[T], dst: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(src[at(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                total += (src[at(a)] - max).exp();
            }
            let log_norm = max + total.ln();
            for a in 0..len {
                dst[at(a)] = src[at(a)] - log_norm;
            }
        }
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// 2-D matrix product `a · b`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 {
                return Err(shape_err("transpose", x.shape(), &[2]));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let src = x.data();
            let mut data = Vec::with_capacity(r * c);
            for j in 0..c {
                data.extend((0..r).map(|i| src[i * c + j]));
            }
            Tensor::new(vec![c, r], data)?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if !broadcastable(x.shape(), y.shape()) {
                return Err(shape_err(name, x.shape(), y.shape()));
            }
            let yd = y.data();
            let data = if yd.is_empty() {
                Vec::new()
            } else {
                x.data()
                    .chunks_exact(yd.len())
                    .flat_map(|chunk| chunk.iter().zip(yd).map(|(&p, &q)| f(p, q)))
                    .collect()
            };
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise `a + b`; `b` may be broadcast over the leading dims of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|v| v * s);
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts
                .first()
                .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?
                .0]
                .value
                .shape()
                .to_vec();
            check_axis("concat", &first, axis)?;
            let mut shape = first.clone();
            shape[axis] = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (x, y))| d == axis || x == y);
                if !compatible {
                    return Err(shape_err("concat", &first, s));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = axis_extents(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let x = &nodes[p.0].value;
                    let chunk = x.shape()[axis] * inner;
                    data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        let rg = self.needs_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Selects rows (slices along axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() == 0 {
                return Err(shape_err("gather_rows", x.shape(), &[1]));
            }
            let rows = x.shape()[0];
            let width = x.cols();
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                if i >= rows {
                    return Err(Error::InvalidInput(format!(
                        "gather_rows index {i} out of range for {rows} rows"
                    )));
                }
                data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data)?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() == 0 || start + len > x.shape()[0] {
                return Err(shape_err("narrow", x.shape(), &[start, len]));
            }
            let width = x.cols();
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Tensor::new(shape, x.data()[start * width..(start + len) * width].to_vec())?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Narrow(a, start), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.map(|v| v.max(T::zero()));
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Maximum along `axis` (the axis is removed). Ties resolve to the
    /// lowest index, which is where the gradient flows.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            check_axis("max_axis", x.shape(), axis)?;
            let (outer, len, inner) = axis_extents(x.shape(), axis);
            if len == 0 {
                return Err(shape_err("max_axis", x.shape(), &[axis]));
            }
            let src = x.data();
            let mut data = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..inner {
                    let mut best = base + i;
                    for l in 1..len {
                        let at = base + l * inner + i;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, data)?, argmax)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::MaxAxis { src: a, argmax }, rg))
    }

    /// `out[i] = max_{t < k} a[indices[i·k + t]]`, channel by channel, for
    /// a 2-D `a`. Equivalent to gathering the rows, reshaping to
    /// `[len/k, k, C]` and taking the max over axis 1, without
    /// materializing the gathered rows. Ties resolve to the earliest `t`.
    pub fn gather_max(&self, a: Var, indices: &[usize], k: usize) -> Result<Var> {
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 || k == 0 || !indices.len().is_multiple_of(k) {
                return Err(shape_err("gather_max", x.shape(), &[indices.len(), k]));
            }
            let (rows, c) = (x.shape()[0], x.shape()[1]);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::InvalidInput(format!(
                    "gather_max index {bad} out of range for {rows} rows"
                )));
            }
            let src = x.data();
            let groups = indices.len() / k;
            let mut data = Vec::with_capacity(groups * c);
            let mut argmax = Vec::with_capacity(groups * c);
            for g in indices.chunks_exact(k) {
                let first = g[0] * c;
                data.extend_from_slice(&src[first..first + c]);
                argmax.extend(first..first + c);
                let base = data.len() - c;
                for &j in &g[1..] {
                    let row = &src[j * c..(j + 1) * c];
                    for (ch, &v) in row.iter().enumerate() {
                        if v > data[base + ch] {
                            data[base + ch] = v;
                            argmax[base + ch] = j * c + ch;
                        }
                    }
                }
            }
            (Tensor::new(vec![groups, c], data)?, argmax)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::MaxAxis { src: a, argmax }, rg))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            check_axis("softmax", x.shape(), axis)?;
            let (outer, len, inner) = axis_extents(x.shape(), axis);
            let mut out = Tensor::zeros(x.shape());
            softmax_lane(x.data(), out.data_mut(), outer, len, inner);
            out
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            check_axis("log_softmax", x.shape(), axis)?;
            let (outer, len, inner) = axis_extents(x.shape(), axis);
            let mut out = Tensor::zeros(x.shape());
            log_softmax_lane(x.data(), out.data_mut(), outer, len, inner);
            out
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[B, K]`, or `[K]` for a single row).
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            let (rows, k) = match x.shape() {
                [k] => (1, *k),
                [b, k] => (*b, *k),
                s => return Err(shape_err("cross_entropy", s, &[2])),
            };
            if labels.len() != rows {
                return Err(shape_err("cross_entropy", x.shape(), &[labels.len()]));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::InvalidInput(format!(
                    "cross_entropy label {bad} out of range for {k} classes"
                )));
            }
            let mut logp = vec![T::zero(); rows * k];
            log_softmax_lane(x.data(), &mut logp, rows, k, 1);
            let mut total = T::zero();
            for (r, &l) in labels.iter().enumerate() {
                total -= logp[r * k + l];
            }
            let probs = logp.iter().map(|v| v.exp()).collect::<Vec<_>>();
            let n = T::from_usize(rows.max(1)).unwrap();
            (Tensor::scalar(total / n), probs)
        };
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].value.data().iter().copied().sum();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let mean = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let total: T = x.data().iter().copied().sum();
            total / T::from_usize(x.numel().max(1)).unwrap()
        };
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(mean), Op::Mean(a), rg)
    }

    /// Per-column standardization of an `[N, C]` matrix over its rows
    /// (zero mean, unit biased variance, epsilon 1e-5).
    pub fn channel_norm(&self, a: Var) -> Result<Var> {
        let (out, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 {
                return Err(shape_err("channel_norm", x.shape(), &[2]));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            // Statistics accumulate in f64 so single-precision results do
            // not depend on the row order.
            let nf = n.max(1) as f64;
            let mut sum = vec![0.0f64; c];
            for row in x.data().chunks_exact(c) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v.as_f64();
                }
            }
            let mean64: Vec<f64> = sum.iter().map(|s| s / nf).collect();
            let mut var = vec![0.0f64; c];
            for row in x.data().chunks_exact(c) {
                for j in 0..c {
                    let d = row[j].as_f64() - mean64[j];
                    var[j] += d * d;
                }
            }
            let mean: Vec<T> = mean64.iter().map(|&m| T::from_f64_lossy(m)).collect();
            let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy((v / nf + NORM_EPS).sqrt().recip())).collect();
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                for j in 0..c {
                    row[j] = (row[j] - mean[j]) * inv_std[j];
                }
            }
            (out, inv_std)
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(out, Op::ChannelNorm { src: a, inv_std }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err("backward", nodes[loss.0].value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut emit = |v: Var, contribution: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc.data_mut(), &contribution),
                    slot @ None => {
                        *slot = Some(
                            Tensor::new(nodes[v.0].value.shape().to_vec(), contribution)
                                .expect("gradient shape"),
                        )
                    }
                }
            };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    if nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, gd, false, y.data(), true, &mut da, false);
                        emit(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, x.data(), true, gd, false, &mut db, false);
                        emit(*b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut da = Vec::with_capacity(r * c);
                    for j in 0..c {
                        da.extend((0..r).map(|i| gd[i * c + j]));
                    }
                    emit(*a, da);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    emit(*a, gd.to_vec());
                    if nodes[b.0].requires_grad {
                        let mut db = reduce_broadcast(gd, nodes[b.0].value.numel());
                        if negate {
                            db.iter_mut().for_each(|v| *v = -*v);
                        }
                        emit(*b, db);
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].requires_grad {
                        let da = gd
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * y[i % y.len()])
                            .collect();
                        emit(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let prod: Vec<T> = gd.iter().zip(x).map(|(&g, &p)| g * p).collect();
                        emit(*b, reduce_broadcast(&prod, y.len()));
                    }
                }
                Op::Scale(a, s) => emit(*a, gd.iter().map(|&v| v * *s).collect()),
                Op::Concat(parts, axis) => {
                    let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| nodes[p.0].value.shape()[*axis] * inner)
                        .collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (p, &w) in parts.iter().zip(&widths) {
                        let mut dp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            dp.extend_from_slice(&gd[start..start + w]);
                        }
                        emit(*p, dp);
                        offset += w;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let src = &nodes[a.0].value;
                    let width = src.cols();
                    let mut da = vec![T::zero(); src.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(
                            &mut da[i * width..(i + 1) * width],
                            &gd[r * width..(r + 1) * width],
                        );
                    }
                    emit(*a, da);
                }
                Op::Narrow(a, start) => {
                    let src = &nodes[a.0].value;
                    let width = src.cols();
                    let mut da = vec![T::zero(); src.numel()];
                    da[start * width..start * width + gd.len()].copy_from_slice(gd);
                    emit(*a, da);
                }
                Op::Reshape(a) => emit(*a, gd.to_vec()),
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    let da = gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    emit(*a, da);
                }
                Op::MaxAxis { src, argmax } => {
                    let mut da = vec![T::zero(); nodes[src.0].value.numel()];
                    for (&at, &g) in argmax.iter().zip(gd) {
                        da[at] += g;
                    }
                    emit(*src, da);
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    let mut da = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: T = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                    emit(*a, da);
                }
                Op::LogSoftmax(a, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    let mut da = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let total: T = (0..len).map(|l| gd[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] = gd[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                    emit(*a, da);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let k = probs.len() / rows.max(1);
                    let scale = gd[0] / T::from_usize(rows.max(1)).unwrap();
                    let mut da: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        da[r * k + l] -= scale;
                    }
                    emit(*logits, da);
                }
                Op::Sum(a) => emit(*a, vec![gd[0]; nodes[a.0].value.numel()]),
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    emit(*a, vec![gd[0] / T::from_usize(n.max(1)).unwrap(); n]);
                }
                Op::ChannelNorm { src, inv_std } => {
                    let xhat = node.value.data();
                    let c = inv_std.len();
                    let n = xhat.len() / c.max(1);
                    let nf = T::from_usize(n.max(1)).unwrap();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xrow[j];
                        }
                    }
                    let mut da = vec![T::zero(); xhat.len()];
                    for (r, (grow, xrow)) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate()
                    {
                        for j in 0..c {
                            da[r * c + j] = inv_std[j] / nf
                                * (nf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                        }
                    }
                    emit(*src, da);
                }
            }
            // Keep the gradient of interior nodes available to callers.
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
