//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its nodes. Node values are
//! immutable once produced. [`Graph::backward`] consumes the graph, walks the
//! tape in reverse and returns the gradients of every node that requires one.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    ScalarAdd(Var, Var),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    ScaleGrad { x: Var, factor: f64 },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound_params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` sizes for iterating over `axis` of `shape`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    // copy contiguous runs along the last output axis when it is also the last input axis
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let run = out_shape[last];
    let run_stride = strides[last];
    loop {
        let base: usize = idx[..last].iter().zip(&strides[..last]).map(|(i, s)| i * s).sum();
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|j| data[base + j * run_stride]));
        }
        // advance the multi-index over all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[inline]
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation of x * Phi(x); returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let value = half * x * (one + th);
    let du = c * (one + three * k * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * du;
    (value, deriv)
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound_params: HashMap::new(),
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
        debug_assert!(
            value.is_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by a parameter (gradient-check inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value().clone(), Op::Leaf, !p.is_frozen());
        self.bound_params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either a shared `[k, n]` matrix or has the
    /// same leading batch axes as `a`. With `trans_b`, `b` holds `[.., n, k]`
    /// and the product uses its transpose.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        if shared {
            T::gemm(batch * m, k, n, da, false, db, trans_b, &mut out, T::zero());
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let chunk = vb.len().max(1);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(chunk) {
            for (x, &y) in row.iter_mut().zip(vb) {
                *x = *x + y;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddSuffix(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        self.unary(x, Op::Scale(x, factor), |v| v * f)
    }

    fn check_scalar(&self, op: &'static str, x: Var, s: Var) -> Result<()> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        Ok(())
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("scalar_mul", x, s)?;
        let f = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * f);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScalarMul(x, s), rg))
    }

    /// Adds the single-element node `s` to every element of `x`.
    pub fn scalar_add(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("scalar_add", x, s)?;
        let f = self.value(s).data()[0];
        let out = self.value(x).map(|v| v + f);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScalarAdd(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        // sequential reduction keeps results reproducible
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum over the sorted values, so the result does not depend on element
    /// order. Gradient is the same as [`Graph::sum`].
    pub fn sum_sorted(&mut self, x: Var) -> Var {
        let mut vals = self.value(x).data().to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let s = vals.iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(s / T::from_f64(n as f64)),
            Op::Mean(x),
            rg,
        )
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_axis",
                reason: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::from_f64(1.0 / len as f64);
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, axis },
            rg,
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let out = softmax_forward(self.value(x).data(), &shape, axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, axis },
            rg,
        ))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "scalar input".into(),
        })?;
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each last-axis vector to unit L2 norm: `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "l2_normalize",
            reason: "scalar input".into(),
        })?;
        let mut out = self.value(x).data().to_vec();
        let e = T::from_f64(eps);
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n == T::zero() {
                log::warn!("l2_normalize: zero vector, output stays zero");
            }
            let denom = n + e;
            for v in row.iter_mut() {
                *v = *v / denom;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x, eps },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("target {bad} out of range for {c} classes"),
            });
        }
        let probs = softmax_forward(self.value(logits).data(), &shape, 1);
        let mut total = T::zero();
        for (b, &t) in targets.iter().enumerate() {
            // log of a probability recomputed via log-sum-exp for accuracy
            let row = &self.value(logits).data()[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + (lse - row[t]);
        }
        let loss = total / T::from_f64(targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid || shape.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("permutation {perm:?} invalid for shape {shape:?}"),
            });
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} invalid for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor`. Used to build negative controls for gradient checking.
    #[doc(hidden)]
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(out, Op::ScaleGrad { x, factor }, rg)
    }

    /// Inverted dropout: zeroes elements with probability `p` and rescales the rest.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {p} must be < 1"),
            });
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let Graph {
            nodes,
            bound_params,
        } = self;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, &mut grads, node, &gout);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: bound_params.into_iter().map(|(id, v)| (v, id)).collect(),
        })
    }
}

fn softmax_forward<T: Real>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| src[at(l)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (src[at(l)] - max).exp();
                out[at(l)] = e;
                total = total + e;
            }
            for l in 0..len {
                out[at(l)] = out[at(l)] / total;
            }
        }
    }
    out
}

/// Mutable gradient buffer for `v`, allocated on first use; `None` when `v`
/// does not require a gradient.
fn grad_buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    node: &Node<T>,
    gout: &Tensor<T>,
) {
    let g = gout.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = if *trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let shared = sb.len() == 2;
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                // dA = dC · op(B)ᵀ
                #[cfg(feature = "corrupt-gradients")]
                let before: Vec<T> = ga.to_vec();
                if shared {
                    T::gemm(batch * m, n, k, g, false, vb, !*trans_b, ga, T::one());
                } else {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            T::one(),
                        );
                    }
                }
                #[cfg(feature = "corrupt-gradients")]
                for (x, b0) in ga.iter_mut().zip(before) {
                    *x = b0 + (*x - b0) * T::from_f64(2.0);
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                // dB = Aᵀ · dC, or dCᵀ · A when B was used transposed
                let reps = if shared { 1 } else { batch };
                let rows = if shared { batch * m } else { m };
                for i in 0..reps {
                    let ai = &va[i * rows * k..(i + 1) * rows * k];
                    let gi = &g[i * rows * n..(i + 1) * rows * n];
                    let bi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        T::gemm(n, rows, k, gi, true, ai, false, bi, T::one());
                    } else {
                        T::gemm(k, rows, n, ai, true, gi, false, bi, T::one());
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_buf(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x - d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *x = *x + d * y;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for ((x, &d), &y) in gb.iter_mut().zip(g).zip(va) {
                    *x = *x + d * y;
                }
            }
        }
        Op::AddSuffix(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x = *x + d);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let chunk = gb.len().max(1);
                for row in g.chunks(chunk) {
                    gb.iter_mut().zip(row).for_each(|(x, &d)| *x = *x + d);
                }
            }
        }
        Op::Scale(x, f) => {
            let f = T::from_f64(*f);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d * f);
            }
        }
        Op::ScalarMul(x, s) => {
            let sv = val(*s)[0];
            let vx = val(*x);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d * sv);
            }
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                let dot = g.iter().zip(vx).fold(T::zero(), |acc, (&d, &v)| acc + d * v);
                gs[0] = gs[0] + dot;
            }
        }
        Op::ScalarAdd(x, s) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d);
            }
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                let total = g.iter().fold(T::zero(), |acc, &d| acc + d);
                gs[0] = gs[0] + total;
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((v, &d), &e) in gx.iter_mut().zip(g).zip(y) {
                    *v = *v + d * e;
                }
            }
        }
        Op::Softplus(x) => {
            let vx = val(*x);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((v, &d), &u) in gx.iter_mut().zip(g).zip(vx) {
                    *v = *v + d * sigmoid(u);
                }
            }
        }
        Op::Gelu(x) => {
            let vx = val(*x);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((v, &d), &u) in gx.iter_mut().zip(g).zip(vx) {
                    *v = *v + d * gelu_parts(u).1;
                }
            }
        }
        Op::Sum(x) => {
            let d = g[0];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v = *v + d);
            }
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel().max(1);
            let d = g[0] / T::from_f64(n as f64);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v = *v + d);
            }
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let inv = T::from_f64(1.0 / len as f64);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(v, &d)| *v = *v + d * inv);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, l| acc + g[at(l)] * y[at(l)]);
                        for l in 0..len {
                            let j = at(l);
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.value.shape().last().unwrap();
            let gv = val(*gain);
            let rows = rstd.len();
            if let Some(gg) = grad_buf(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] = gb[j] + g[r * d + j];
                    }
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let inv_d = T::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for j in 0..d {
                        let dh = g[r * d + j] * gv[j];
                        let h = xhat[r * d + j];
                        gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - mean_dh - h * mean_dh_h);
                    }
                }
            }
        }
        Op::L2Normalize { x, eps } => {
            let vx = val(*x);
            let d = *node.value.shape().last().unwrap();
            let e = T::from_f64(*eps);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((xr, gr), dr) in vx.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let n = xr.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                    let denom = n + e;
                    let dot = xr.iter().zip(gr).fold(T::zero(), |a, (&v, &w)| a + v * w);
                    let coef = if n > T::zero() {
                        dot / (n * denom * denom)
                    } else {
                        T::zero()
                    };
                    for ((out, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *out = *out + gv / denom - xv * coef;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].value.shape()[1];
            let scale = g[0] / T::from_f64(targets.len() as f64);
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (b, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[b * c + j] = gl[b * c + j] + (probs[b * c + j] - onehot) * scale;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d);
            }
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, back) = permute_data(g, node.value.shape(), &inverse);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(back).for_each(|(v, d)| *v = *v + d);
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(v, &d)| *v = *v + d);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &d)| *x = *x + d);
                    }
                }
                offset += len;
            }
        }
        Op::ScaleGrad { x, factor } => {
            let f = T::from_f64(*factor);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &d)| *v = *v + d * f);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradients of every bound, non-frozen parameter into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.params {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}
