//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! the indices of its parents. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Graph::backward`] walks
//! it once in reverse. A graph supports exactly one backward pass; the
//! training loop builds a fresh graph per step.
//!
//! Broadcasting is limited to leading-batch expansion: the right operand of
//! [`Graph::add`] / [`Graph::mul`] may have a shape equal to a suffix of the
//! left operand's shape. Per-row conditioning used by adaptive layer norm is
//! expressed with the dedicated [`Graph::modulate`] and [`Graph::gate`] ops.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::{matmul_into, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Transpose { a: Var, d0: usize, d1: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { a: Var, eps: T },
    Gelu(Var),
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    Sinusoidal { x: Var, max_period: T },
    Modulate { x: Var, shift: Var, scale: Var },
    Gate { x: Var, gate: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients of a scalar loss with respect to every leaf created with
/// `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (if last == 0 { 0 } else { numel / last }, last)
}

/// `[outer, axis, inner]` view of `shape` around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// tanh through one exp; libm tanh dominated inference time.
fn tanh_exp<T: Real>(u: T) -> T {
    let one = T::one();
    one - (one + one) / ((u + u).exp() + one)
}

fn gelu_value<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let x3 = x * x * x;
    let u = c * (x + T::of(0.044715) * x3);
    T::of(0.5) * x * (T::one() + tanh_exp(u))
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    let th = tanh_exp(u);
    let y = half * x * (one + th);
    let du = c * (one + T::of(3.0) * k * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * du;
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn sinusoid_freqs<T: Real>(dim: usize, max_period: T) -> Vec<T> {
    let half = dim / 2;
    (0..half)
        .map(|i| (-(max_period.ln()) * T::of(i as f64) / T::of(half as f64)).exp())
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; no node requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    /// Elementwise `a + b`; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        if inner > 0 {
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, &y) in chunk.iter_mut().zip(bv) {
                    *o += y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a - b` on identical shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("sub", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o -= y;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise `a * b`; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        if inner > 0 {
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, &y) in chunk.iter_mut().zip(bv) {
                    *o *= y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [..., m, k]`. Either `b: [k, n]` is shared by every leading batch
    /// element, or `b: [..., k, n]` carries the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let shared_rhs = sb.len() == 2;
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if shared_rhs {
            matmul_into(batch * m, k, n, av, false, bv, false, &mut out, false);
        } else {
            if sb[..sb.len() - 2] != *lead {
                return Err(TensorError::shape("matmul", &sa, &sb));
            }
            for i in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, shared_rhs }, rg))
    }

    /// Swap two axes (materialized copy).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(TensorError::usage(
                "transpose",
                format!("axes ({d0}, {d1}) out of range for shape {shape:?}"),
            ));
        }
        let out = transpose_tensor(self.value(a), d0, d1);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose { a, d0, d1 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::usage("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::usage("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::usage(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = around_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Slice { a, axis, start }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, w) = split_rows(self.shape(a));
        let mut out = self.value(a).clone();
        if w > 0 {
            for row in out.data_mut().chunks_mut(w) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                let inv = T::one() / s;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis without learned affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let (_, w) = split_rows(self.shape(a));
        let mut out = self.value(a).clone();
        if w > 0 {
            let inv_w = T::one() / T::of(w as f64);
            for row in out.data_mut().chunks_mut(w) {
                let mean = row.iter().copied().sum::<T>() * inv_w;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_w;
                let inv = T::one() / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { a, eps }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_value);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    /// Rows of `table: [V, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::usage(
                "embedding",
                format!("table must be 2-D, got {shape:?}"),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::usage(
                "embedding",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of all elements (scalar).
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::of(v.numel().max(1) as f64);
        let out = Tensor::scalar(v.data().iter().copied().sum::<T>() / n);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum::<T>());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean squared error between equally shaped tensors (scalar).
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::shape(
                "mse_loss",
                self.shape(pred),
                self.shape(target),
            ));
        }
        let a = self.value(pred).data();
        let b = self.value(target).data();
        let n = T::of(a.len().max(1) as f64);
        let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), rg))
    }

    /// Sinusoidal features of a 1-D input: `[n] -> [n, dim]`, cosines in the
    /// first half and sines in the second, frequencies geometrically spaced
    /// from 1 down to `1/max_period`.
    pub fn sinusoidal_features(&mut self, x: Var, dim: usize, max_period: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || dim == 0 || dim % 2 != 0 {
            return Err(TensorError::usage(
                "sinusoidal_features",
                format!("need 1-D input and even dim, got {shape:?} and {dim}"),
            ));
        }
        let n = shape[0];
        let half = dim / 2;
        let freqs = sinusoid_freqs(dim, max_period);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * dim];
        for (r, &xv) in xs.iter().enumerate() {
            for (i, &f) in freqs.iter().enumerate() {
                out[r * dim + i] = (xv * f).cos();
                out[r * dim + half + i] = (xv * f).sin();
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(&[n, dim], out)?;
        Ok(self.push(t, Op::Sinusoidal { x, max_period }, rg))
    }

    fn check_rowwise(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        let sv = self.shape(v);
        if sx.len() != 3 || sv.len() != 2 || sx[0] != sv[0] || sx[2] != sv[1] {
            return Err(TensorError::shape(op, sx, sv));
        }
        Ok((sx[0], sx[1], sx[2]))
    }

    /// `x * (1 + scale) + shift` with `x: [B, N, d]` and per-batch
    /// `shift, scale: [B, d]` applied to every token.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let (b, n, d) = self.check_rowwise("modulate", x, shift)?;
        self.check_rowwise("modulate", x, scale)?;
        let sh = self.value(shift).data();
        let sc = self.value(scale).data();
        let mut out = self.value(x).clone();
        let o = out.data_mut();
        for bi in 0..b {
            for ti in 0..n {
                let row = &mut o[(bi * n + ti) * d..(bi * n + ti + 1) * d];
                for j in 0..d {
                    row[j] = row[j] * (T::one() + sc[bi * d + j]) + sh[bi * d + j];
                }
            }
        }
        let rg = self.rg(&[x, shift, scale]);
        Ok(self.push(out, Op::Modulate { x, shift, scale }, rg))
    }

    /// `x * gate` with `x: [B, N, d]` and per-batch `gate: [B, d]`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (b, n, d) = self.check_rowwise("gate", x, gate)?;
        let g = self.value(gate).data();
        let mut out = self.value(x).clone();
        let o = out.data_mut();
        for bi in 0..b {
            for ti in 0..n {
                let row = &mut o[(bi * n + ti) * d..(bi * n + ti + 1) * d];
                for j in 0..d {
                    row[j] *= g[bi * d + j];
                }
            }
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(out, Op::Gate { x, gate }, rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::usage(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut by_leaf = HashMap::new();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { by_leaf });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !nodes[idx].requires_grad {
                continue;
            }
            let node = &nodes[idx];
            let mut acc = Accum {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    by_leaf.insert(Var(idx), Tensor::new(&shape, g)?);
                }
                Op::Add(a, b) => {
                    let inner = acc.numel(*b);
                    acc.add(*b, || reduce_leading(&g, inner));
                    acc.add_owned(*a, g);
                }
                Op::Sub(a, b) => {
                    acc.add(*b, || g.iter().map(|&x| -x).collect());
                    acc.add_owned(*a, g);
                }
                Op::Mul(a, b) => {
                    let inner = acc.numel(*b);
                    let av = acc.value(*a).data();
                    let bv = acc.value(*b).data();
                    acc.add(*b, || {
                        let mut out = vec![T::zero(); inner];
                        if inner > 0 {
                            for (gc, ac) in g.chunks(inner).zip(av.chunks(inner)) {
                                for j in 0..inner {
                                    out[j] += gc[j] * ac[j];
                                }
                            }
                        }
                        out
                    });
                    acc.add(*a, || {
                        g.iter()
                            .enumerate()
                            .map(|(i, &x)| x * bv[i % inner])
                            .collect()
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc.add(*a, || g.iter().map(|&x| x * s).collect());
                }
                Op::MatMul { a, b, shared_rhs } => {
                    let sa = acc.value(*a).shape().to_vec();
                    let sb = acc.value(*b).shape().to_vec();
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = sb[sb.len() - 1];
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    let av = acc.value(*a).data();
                    let bv = acc.value(*b).data();
                    if *shared_rhs {
                        acc.add(*a, || {
                            let mut ga = vec![T::zero(); batch * m * k];
                            matmul_into(batch * m, n, k, &g, false, bv, true, &mut ga, false);
                            ga
                        });
                        acc.add(*b, || {
                            let mut gb = vec![T::zero(); k * n];
                            matmul_into(k, batch * m, n, av, true, &g, false, &mut gb, false);
                            gb
                        });
                    } else {
                        acc.add(*a, || {
                            let mut ga = vec![T::zero(); batch * m * k];
                            for i in 0..batch {
                                matmul_into(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    true,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                    false,
                                );
                            }
                            ga
                        });
                        acc.add(*b, || {
                            let mut gb = vec![T::zero(); batch * k * n];
                            for i in 0..batch {
                                matmul_into(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..(i + 1) * m * k],
                                    true,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    false,
                                );
                            }
                            gb
                        });
                    }
                }
                Op::Transpose { a, d0, d1 } => {
                    let out_shape = node.value.shape().to_vec();
                    let (d0, d1) = (*d0, *d1);
                    acc.add(*a, || {
                        let gt = Tensor::new(&out_shape, g.clone()).expect("grad shape");
                        transpose_tensor(&gt, d0, d1).into_data()
                    });
                }
                Op::Reshape(a) => acc.add_owned(*a, g),
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape().to_vec();
                    let (outer, total, inner) = around_axis(&out_shape, *axis);
                    let mut offset = 0;
                    for p in parts {
                        let len = acc.value(*p).shape()[*axis];
                        acc.add(*p, || {
                            let mut out = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                out.extend_from_slice(&g[base..base + len * inner]);
                            }
                            out
                        });
                        offset += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let in_shape = acc.value(*a).shape().to_vec();
                    let (outer, n, inner) = around_axis(&in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let start = *start;
                    acc.add(*a, || {
                        let mut out = vec![T::zero(); outer * n * inner];
                        for o in 0..outer {
                            let dst = (o * n + start) * inner;
                            let src = o * len * inner;
                            out[dst..dst + len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        out
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (_, w) = split_rows(node.value.shape());
                    acc.add(*a, || {
                        let mut out = vec![T::zero(); y.len()];
                        for ((o, yr), gr) in out.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                            let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..w {
                                o[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        out
                    });
                }
                Op::LayerNorm { a, eps } => {
                    let y = node.value.data();
                    let x = acc.value(*a).data();
                    let (_, w) = split_rows(node.value.shape());
                    let eps = *eps;
                    acc.add(*a, || {
                        let inv_w = T::one() / T::of(w as f64);
                        let mut out = vec![T::zero(); y.len()];
                        for (r, o) in out.chunks_mut(w).enumerate() {
                            let xr = &x[r * w..(r + 1) * w];
                            let yr = &y[r * w..(r + 1) * w];
                            let gr = &g[r * w..(r + 1) * w];
                            let mean = xr.iter().copied().sum::<T>() * inv_w;
                            let var =
                                xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
                            let inv = T::one() / (var + eps).sqrt();
                            let gm = gr.iter().copied().sum::<T>() * inv_w;
                            let gy: T =
                                gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() * inv_w;
                            for j in 0..w {
                                o[j] = inv * (gr[j] - gm - yr[j] * gy);
                            }
                        }
                        out
                    });
                }
                Op::Gelu(a) => {
                    let x = acc.value(*a).data();
                    acc.add(*a, || {
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| gv * gelu_parts(xv).1)
                            .collect()
                    });
                }
                Op::Silu(a) => {
                    let x = acc.value(*a).data();
                    acc.add(*a, || {
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                let s = sigmoid(xv);
                                gv * s * (T::one() + xv * (T::one() - s))
                            })
                            .collect()
                    });
                }
                Op::Embedding { table, ids } => {
                    let shape = acc.value(*table).shape().to_vec();
                    let d = shape[1];
                    acc.add(*table, || {
                        let mut out = vec![T::zero(); shape[0] * d];
                        for (r, &i) in ids.iter().enumerate() {
                            for j in 0..d {
                                out[i * d + j] += g[r * d + j];
                            }
                        }
                        out
                    });
                }
                Op::Mean(a) => {
                    let n = acc.numel(*a);
                    let s = g[0] / T::of(n.max(1) as f64);
                    acc.add(*a, || vec![s; n]);
                }
                Op::Sum(a) => {
                    let n = acc.numel(*a);
                    acc.add(*a, || vec![g[0]; n]);
                }
                Op::Mse(p, t) => {
                    let pv = acc.value(*p).data();
                    let tv = acc.value(*t).data();
                    let c = T::of(2.0) * g[0] / T::of(pv.len().max(1) as f64);
                    let diff: Vec<T> = pv.iter().zip(tv).map(|(&a, &b)| c * (a - b)).collect();
                    acc.add(*t, || diff.iter().map(|&x| -x).collect());
                    acc.add_owned(*p, diff);
                }
                Op::Sinusoidal { x, max_period } => {
                    let dim = node.value.shape()[1];
                    let half = dim / 2;
                    let freqs = sinusoid_freqs(dim, *max_period);
                    let xs = acc.value(*x).data();
                    acc.add(*x, || {
                        xs.iter()
                            .enumerate()
                            .map(|(r, &xv)| {
                                freqs
                                    .iter()
                                    .enumerate()
                                    .map(|(i, &f)| {
                                        -g[r * dim + i] * (xv * f).sin() * f
                                            + g[r * dim + half + i] * (xv * f).cos() * f
                                    })
                                    .sum()
                            })
                            .collect()
                    });
                }
                Op::Modulate { x, shift, scale } => {
                    let shape = acc.value(*x).shape().to_vec();
                    let (b, n, d) = (shape[0], shape[1], shape[2]);
                    let xv = acc.value(*x).data();
                    let sc = acc.value(*scale).data();
                    acc.add(*shift, || rowwise_reduce(&g, None, b, n, d));
                    acc.add(*scale, || rowwise_reduce(&g, Some(xv), b, n, d));
                    acc.add(*x, || {
                        let mut out = g.clone();
                        rowwise_scale(&mut out, sc, b, n, d, T::one());
                        out
                    });
                }
                Op::Gate { x, gate } => {
                    let shape = acc.value(*x).shape().to_vec();
                    let (b, n, d) = (shape[0], shape[1], shape[2]);
                    let xv = acc.value(*x).data();
                    let gv = acc.value(*gate).data();
                    acc.add(*gate, || rowwise_reduce(&g, Some(xv), b, n, d));
                    acc.add(*x, || {
                        let mut out = g.clone();
                        rowwise_scale(&mut out, gv, b, n, d, T::zero());
                        out
                    });
                }
            }
            // Free the forward value once its consumers are done.
            if !matches!(nodes[idx].op, Op::Leaf) {
                nodes[idx].value = Tensor::zeros(&[0]);
            }
        }
        Ok(Gradients { by_leaf })
    }
}

struct Accum<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> Accum<'a, T> {
    fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn add(&mut self, v: Var, f: impl FnOnce() -> Vec<T>) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.add_owned(v, g);
        }
    }

    fn add_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn reduce_leading<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    if inner > 0 {
        for chunk in g.chunks(inner) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
    }
    out
}

/// Sum over the token axis of `g` (optionally times `x`): `[B, N, d] -> [B, d]`.
fn rowwise_reduce<T: Real>(g: &[T], x: Option<&[T]>, b: usize, n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * d];
    for bi in 0..b {
        let o = &mut out[bi * d..(bi + 1) * d];
        for ti in 0..n {
            let base = (bi * n + ti) * d;
            match x {
                Some(x) => {
                    for j in 0..d {
                        o[j] += g[base + j] * x[base + j];
                    }
                }
                None => {
                    for j in 0..d {
                        o[j] += g[base + j];
                    }
                }
            }
        }
    }
    out
}

/// In-place `g[b, n, j] *= offset + s[b, j]`.
fn rowwise_scale<T: Real>(g: &mut [T], s: &[T], b: usize, n: usize, d: usize, offset: T) {
    for bi in 0..b {
        for ti in 0..n {
            let base = (bi * n + ti) * d;
            for j in 0..d {
                g[base + j] *= offset + s[bi * d + j];
            }
        }
    }
}

/// Swap axes `d0` and `d1` of a tensor.
pub fn transpose_tensor<T: Real>(t: &Tensor<T>, d0: usize, d1: usize) -> Tensor<T> {
    let (lo, hi) = if d0 <= d1 { (d0, d1) } else { (d1, d0) };
    let shape = t.shape();
    if lo == hi {
        return t.clone();
    }
    let pre: usize = shape[..lo].iter().product();
    let a = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let b = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..pre {
        for j in 0..b {
            for m in 0..mid {
                for i in 0..a {
                    let base = ((((p * a + i) * mid + m) * b) + j) * post;
                    out.extend_from_slice(&src[base..base + post]);
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(lo, hi);
    Tensor::new(&out_shape, out).expect("transpose preserves numel")
}
