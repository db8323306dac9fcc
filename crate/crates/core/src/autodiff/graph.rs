//! Reverse-mode differentiation over a recorded operation sequence.
//!
//! Every op appends a node holding its forward value and the handles it was
//! computed from. [`Graph::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order by construction.

use std::collections::HashMap;

use crate::autodiff::einsum::{self, EinsumSpec};
use crate::autodiff::triangular;
use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BoolTensor, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive score penalty applied to masked positions before normalization.
pub const MASK_PENALTY: f64 = -1e9;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Leaf,
    Param,
    Contract { a: Var, b: Var, spec: EinsumSpec },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Reshape { x: Var },
    Gather { table: Var, index: Vec<Option<usize>> },
    ConcatLast { parts: Vec<Var> },
    MaskRows { x: Var, keep: Vec<bool> },
    Sum { x: Var },
    TriValues { alpha: Var, v1: Var, v2: Var },
    TriScores { q: Var, k: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of differentiable tensor operations.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape and the two operand lengths for suffix broadcasting: the
/// shorter shape must be a trailing suffix of the longer one.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(format!("shapes {a:?} and {b:?} are not suffix-broadcastable")));
    }
    Ok(long.to_vec())
}

/// Sums `grad` (of length `out_len`) down to a buffer of `len` by folding the
/// repeated leading blocks.
fn reduce_to<T: Scalar>(grad: &[T], len: usize) -> Vec<T> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in grad.chunks(len) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A constant: participates in the computation but receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A differentiable leaf whose gradient is kept after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds of one id return the same var,
    /// so weight reuse accumulates into a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Einstein-summation contraction of two operands.
    pub fn contract(&mut self, a: Var, b: Var, spec: &str) -> Result<Var> {
        let spec = EinsumSpec::parse(spec)?;
        let value = einsum::contract_parsed(self.value(a), self.value(b), &spec)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Contract { a, b, spec }, rg))
    }

    /// Softmax along `axis` with masked positions forced to exactly zero.
    ///
    /// `mask` (true = allowed) broadcasts against the input shape. A slice with
    /// no allowed position is an error rather than a NaN.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&BoolTensor>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let allowed = mask.map(|m| m.broadcast_to(&shape)).transpose()?;
        let y = softmax_forward(self.value(x).data(), &shape, axis, allowed.as_deref())?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes every vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d.max(1);
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &gi), &bi) in row.iter().zip(g).zip(b) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gi + bi);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Affine map `x W + b` on the trailing axis; `w` is `(d_in, d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::shape(format!("linear: input {xs:?} against weight {ws:?}")));
        }
        let d_out = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape(format!("linear: bias {:?} for width {d_out}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / d_in.max(1);
        let mut out = match b {
            Some(b) => {
                let bias = self.value(b).data();
                let mut o = Vec::with_capacity(rows * d_out);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![T::zero(); rows * d_out],
        };
        T::gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            self.value(x).data(),
            d_in,
            1,
            self.value(w).data(),
            d_out,
            1,
            T::one(),
            &mut out,
            d_out,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Elementwise product; the shorter shape broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise sum; the shorter shape broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: impl Fn(Var, Var) -> Op<T>) -> Result<Var> {
        let shape = suffix_broadcast(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|e| f(av[e % av.len()], bv[e % bv.len()])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, op(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// `out[b, i, j, m, :] = sum_l alpha[b, m, i, j, l] * v1[b, i, l, m, :] * v2[b, l, j, m, :]`
    /// for weights `(b, m, n, n, n)` and values `(b, n, n, m, h)`.
    pub fn triangular_values(&mut self, alpha: Var, v1: Var, v2: Var) -> Result<Var> {
        let dims = triangular::dims(self.shape(alpha), self.shape(v1), self.shape(v2))?;
        let data = triangular::forward(self.value(alpha).data(), self.value(v1).data(), self.value(v2).data(), dims);
        let value = Tensor::new(self.shape(v1), data)?;
        let rg = self.rg(alpha) || self.rg(v1) || self.rg(v2);
        Ok(self.push(value, Op::TriValues { alpha, v1, v2 }, rg))
    }

    /// `scores[b, m, i, j, l] = q[b, i, l, m, :] . k[b, l, j, m, :]` for `q`, `k`
    /// of shape `(b, n, n, m, h)`.
    pub fn triangular_scores(&mut self, q: Var, k: Var) -> Result<Var> {
        let (b, m, n, h) = triangular::score_dims(self.shape(q), self.shape(k))?;
        let data = triangular::scores(self.value(q).data(), self.value(k).data(), (b, m, n, h));
        let value = Tensor::new(&[b, m, n, n, n], data)?;
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(value, Op::TriScores { q, k }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// The class axis is last; `targets` has one entry per remaining position.
    /// Positions whose target equals `ignore_index` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let c = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / c.max(1);
        if targets.len() != rows {
            return Err(Error::shape(format!("cross_entropy: {} targets for {rows} logit rows", targets.len())));
        }
        let targets: Vec<Option<usize>> =
            targets.iter().map(|&t| if Some(t) == ignore_index { None } else { Some(t) }).collect();
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::index(format!("cross_entropy: target {t} outside {c} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::index("cross_entropy: every target is ignored"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &z[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[t];
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::of(count as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "cross_entropy loss".into() });
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, rg))
    }

    /// Selects rows (vectors along the last axis) of `table`; `None` yields a
    /// zero row. Output shape is `(index.len(), d)`.
    pub fn gather(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let d = self.value(table).last_dim();
        let rows = self.value(table).numel() / d.max(1);
        if let Some(r) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::index(format!("gather: row {r} of a {rows}-row table")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for entry in index {
            match entry {
                Some(r) => out.extend_from_slice(&src[r * d..(r + 1) * d]),
                None => out.extend(std::iter::repeat_n(T::zero(), d)),
            }
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(&[index.len(), d], out)?, Op::Gather { table, index: index.to_vec() }, rg))
    }

    /// Concatenates along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        let lead = lead.to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat_last: {s:?} against leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast { parts: parts.to_vec() }, rg))
    }

    /// Zeroes every row (vector along the last axis) whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let d = self.value(x).last_dim();
        let rows = self.value(x).numel() / d.max(1);
        if keep.len() != rows {
            return Err(Error::shape(format!("mask_rows: {} flags for {rows} rows", keep.len())));
        }
        let mut value = self.value(x).clone();
        for (row, &k) in value.data_mut().chunks_mut(d).zip(keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskRows { x, keep: keep.to_vec() }, rg))
    }

    /// Runs reverse accumulation from `root`, seeding it with ones.
    ///
    /// Afterwards [`Graph::grad`] returns gradients for every node that
    /// requires one and [`Graph::param_grads`] lists bound parameters.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Parameter gradients from the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    /// Adds the last backward pass's parameter gradients into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).grad.add_assign(g);
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut send = |v: Var, data: Vec<T>| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            let shape = self.shape(v);
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(data) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data)?),
            }
            Ok(())
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Contract { a, b, spec } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, einsum::contract_grad_lhs(gd, spec, av.shape(), bv.data(), bv.shape())?)?;
                }
                if self.rg(*b) {
                    send(*b, einsum::contract_grad_rhs(gd, spec, av.data(), av.shape(), bv.shape())?)?;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let len = shape[*axis];
                let post: usize = shape[axis + 1..].iter().product();
                let pre: usize = shape[..*axis].iter().product();
                let mut dx = vec![T::zero(); y.len()];
                for p in 0..pre {
                    for q in 0..post {
                        let base = p * len * post + q;
                        let dot: T = (0..len).map(|t| y[base + t * post] * gd[base + t * post]).sum();
                        for t in 0..len {
                            let e = base + t * post;
                            dx[e] = y[e] * (gd[e] - dot);
                        }
                    }
                }
                send(*x, dx)?;
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let dy = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for k in 0..d {
                        let gh = dy[k] * gv[k];
                        mean_g += gh;
                        mean_gx += gh * xh[k];
                        dgain[k] += dy[k] * xh[k];
                        dbias[k] += dy[k];
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for k in 0..d {
                        dx[r * d + k] = rs * (dy[k] * gv[k] - mean_g - xh[k] * mean_gx);
                    }
                }
                send(*x, dx)?;
                send(*gain, dgain)?;
                send(*bias, dbias)?;
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / d_in.max(1);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * d_in];
                    T::gemm(rows, d_out, d_in, T::one(), gd, d_out, 1, wv.data(), 1, d_out, T::zero(), &mut dx, d_in, 1);
                    send(*x, dx)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d_in * d_out];
                    T::gemm(d_in, rows, d_out, T::one(), xv.data(), 1, d_in, gd, d_out, 1, T::zero(), &mut dw, d_out, 1);
                    send(*w, dw)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); d_out];
                        for row in gd.chunks(d_out.max(1)) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        send(*b, db)?;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                send(*x, dx)?;
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let full: Vec<T> = gd.iter().enumerate().map(|(e, &gv)| gv * bv[e % bv.len()]).collect();
                    send(*a, reduce_to(&full, av.len()))?;
                }
                if self.rg(*b) {
                    let full: Vec<T> = gd.iter().enumerate().map(|(e, &gv)| gv * av[e % av.len()]).collect();
                    send(*b, reduce_to(&full, bv.len()))?;
                }
            }
            Op::Add { a, b } => {
                let (na, nb) = (self.value(*a).numel(), self.value(*b).numel());
                if self.rg(*a) {
                    send(*a, reduce_to(gd, na))?;
                }
                if self.rg(*b) {
                    send(*b, reduce_to(gd, nb))?;
                }
            }
            Op::Scale { x, factor } => {
                send(*x, gd.iter().map(|&v| v * *factor).collect())?;
            }
            Op::Sum { x } => {
                send(*x, vec![gd[0]; self.value(*x).numel()])?;
            }
            Op::Reshape { x } => {
                send(*x, gd.to_vec())?;
            }
            Op::TriValues { alpha, v1, v2 } => {
                let (a, b, c) = (self.value(*alpha), self.value(*v1), self.value(*v2));
                let dims = triangular::dims(a.shape(), b.shape(), c.shape())?;
                let (da, db, dc) = triangular::backward(gd, a.data(), b.data(), c.data(), dims);
                send(*alpha, da)?;
                send(*v1, db)?;
                send(*v2, dc)?;
            }
            Op::TriScores { q, k } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let dims = triangular::score_dims(qv.shape(), kv.shape())?;
                let (dq, dk) = triangular::scores_backward(gd, qv.data(), kv.data(), dims);
                send(*q, dq)?;
                send(*k, dk)?;
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).last_dim();
                let scale = gd[0] / T::of(*count as f64);
                let mut dz = vec![T::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for k in 0..c {
                        dz[r * c + k] = probs[r * c + k] * scale;
                    }
                    dz[r * c + t] -= scale;
                }
                send(*logits, dz)?;
            }
            Op::Gather { table, index } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut dt = vec![T::zero(); tv.numel()];
                for (k, entry) in index.iter().enumerate() {
                    if let Some(r) = entry {
                        for (acc, &v) in dt[r * d..(r + 1) * d].iter_mut().zip(&gd[k * d..(k + 1) * d]) {
                            *acc += v;
                        }
                    }
                }
                send(*table, dt)?;
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total.max(1);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    send(p, dp)?;
                    offset += w;
                }
            }
            Op::MaskRows { x, keep } => {
                let d = node.value.last_dim();
                let mut dx = gd.to_vec();
                for (row, &k) in dx.chunks_mut(d).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                send(*x, dx)?;
            }
        }
        Ok(())
    }
}

/// Masked, max-stabilized softmax along `axis` of a row-major buffer.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, allowed: Option<&[bool]>) -> Result<Vec<T>> {
    let len = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    let pre: usize = shape[..axis].iter().product();
    let penalty = T::of(MASK_PENALTY);
    let mut y = vec![T::zero(); x.len()];
    let mut shifted = vec![T::zero(); len];
    for p in 0..pre {
        for q in 0..post {
            let base = p * len * post + q;
            let ok = |t: usize| allowed.is_none_or(|m| m[base + t * post]);
            if len > 0 && !(0..len).any(ok) {
                return Err(Error::DegenerateMask { slice: p * post + q });
            }
            for (t, s) in shifted.iter_mut().enumerate() {
                let v = x[base + t * post];
                *s = if ok(t) { v } else { v + penalty };
            }
            let m = shifted.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for s in shifted.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for (t, &s) in shifted.iter().enumerate() {
                y[base + t * post] = if ok(t) { s / z } else { T::zero() };
            }
        }
    }
    Ok(y)
}
