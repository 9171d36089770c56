//! Reverse-mode differentiation tape.
//!
//! Operations are appended to a [`Graph`] in execution order, so node ids are
//! already a topological order and the backward pass is a single reverse
//! sweep. Each node keeps its forward value; ops that need more than their
//! inputs and output for the backward pass (max-pool argmax, layer-norm
//! statistics) store it inline.

use crate::attention::{check_qkv, LinearAttentionForm};
use crate::conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward};
use crate::counters::{self, Kernel};
use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::float::Float;
use crate::linalg::{matmul, matmul_backward};
use crate::pool::{maxpool2d, maxpool2d_backward};
use crate::resample::{bilinear_upsample, bilinear_upsample_backward};
use crate::softmax::{axis_split, softmax, softmax_backward};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Binary { op: BinOp, a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Relu { x: Var },
    EluPlusOne { x: Var },
    Log { x: Var, floor: T },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Upsample { x: Var, factor: usize },
    Rotate { x: Var, cos: Vec<T>, sin: Vec<T> },
    Gather { x: Var, index: Vec<Option<usize>> },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Forward values are computed eagerly.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that depends on a parameter.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(op, format!("rank mismatch {a:?} vs {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(op, format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    shape.iter().zip(out).zip(s).map(|((&n, &o), st)| if n == 1 && o != 1 { 0 } else { st }).collect()
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of a broadcast
/// binary op.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn permute_tensor<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_bcast(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = xd[i]);
    Tensor::new(out_shape, out).expect("permute shape")
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, ng, "conv2d")
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = depthwise_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(y, Op::Depthwise { x, w, b, stride, pad }, ng, "depthwise_conv2d")
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = maxpool2d(self.value(x), k, stride)?;
        let ng = self.ng(x);
        self.push(y, Op::MaxPool { x, argmax }, ng, "maxpool2d")
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = bcast_strides(ta.shape(), &out_shape);
            let sb = bcast_strides(tb.shape(), &out_shape);
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let (ad, bd) = (ta.data(), tb.data());
            for_each_bcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
            out
        };
        let y = Tensor::new(out_shape, data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Binary { op, a, b }, ng, name)
    }

    /// Elementwise sum; `b` may broadcast along size-1 axes of equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, s }, ng, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(y, Op::AddScalar { x }, ng, "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(y, Op::Relu { x }, ng, "relu")
    }

    pub fn elu_plus_one(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(crate::attention::elu_plus_one);
        let ng = self.ng(x);
        self.push(y, Op::EluPlusOne { x }, ng, "elu_plus_one")
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(y, Op::Log { x, floor }, ng, "log")
    }

    /// Matrix product of the last two axes; see [`crate::matmul`].
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b), ta, tb)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return arg_err("permute", format!("{axes:?} is not a permutation of rank {rank}"));
        }
        let y = permute_tensor(self.value(x), axes);
        let ng = self.ng(x);
        self.push(y, Op::Permute { x, axes: axes.to_vec() }, ng, "permute")
    }

    /// Swap of the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape.to_vec())?;
        let ng = self.ng(x);
        self.push(y, Op::Reshape { x }, ng, "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return arg_err("concat", "no inputs");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return arg_err("concat", format!("axis {axis} out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                return shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let y = Tensor::new(shape, out)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(y, Op::Concat { xs: xs.to_vec(), axis }, ng, "concat")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax(self.value(x), axis)?;
        let ng = self.ng(x);
        self.push(y, Op::Softmax { x, axis }, ng, "softmax")
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap_or(&0);
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return shape_err("layer_norm", format!("affine params must be [{d}]"));
        }
        let rows = xt.numel() / d.max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xt.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xt.numel()];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let y = Tensor::new(xt.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng, "layer_norm")
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = bilinear_upsample(self.value(x), factor)?;
        let ng = self.ng(x);
        self.push(y, Op::Upsample { x, factor }, ng, "upsample")
    }

    /// Rotates consecutive channel pairs `(2j, 2j+1)` of a `[n, d]` matrix by
    /// per-row angles given as `cos`/`sin` tables of shape `[n, d/2]`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if d % 2 != 0 || cos.len() != n * d / 2 || sin.len() != cos.len() {
            return shape_err("rotate_pairs", format!("[{n}, {d}] with {} angles", cos.len()));
        }
        counters::record(Kernel::Rope);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for (p, (&c, &s)) in cos.iter().zip(&sin).enumerate() {
            let (u, v) = (xd[2 * p], xd[2 * p + 1]);
            out[2 * p] = c * u - s * v;
            out[2 * p + 1] = s * u + c * v;
        }
        let y = Tensor::new([n, d], out)?;
        let ng = self.ng(x);
        self.push(y, Op::Rotate { x, cos, sin }, ng, "rotate_pairs")
    }

    /// `out[k] = x.flat[index[k]]`, or zero where `index[k]` is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("{} indices for shape {shape:?}", index.len()));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= xt.numel()) {
            return arg_err("gather", format!("index {bad} out of bounds for {} elements", xt.numel()));
        }
        let data = index.iter().map(|i| i.map_or(T::zero(), |i| xt.data()[i])).collect();
        let y = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(x);
        self.push(y, Op::Gather { x, index }, ng, "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(y, Op::Sum { x }, ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return arg_err("mean", "empty tensor");
        }
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return arg_err("sum_axis", format!("axis {axis} out of range"));
        }
        let (outer, len, inner) = axis_split(xt.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xt.data()[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = 1;
        let y = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        self.push(y, Op::SumAxis { x, axis }, ng, "sum_axis")
    }

    /// `softmax(Q K^T * scale) V` on `[n, d]` or head-batched `[h, n, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: Option<T>) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        let heads = if qs.len() == 3 { qs[0] } else { 1 };
        let (n, m) = (qs[qs.len() - 2], ks[ks.len() - 2]);
        let mut s = self.matmul(q, k, false, true)?;
        counters::add(Kernel::AttentionScores, (heads * n * m) as u64);
        if let Some(c) = scale {
            s = self.scale(s, c)?;
        }
        let last = self.value(s).rank() - 1;
        let p = self.softmax(s, last)?;
        self.matmul(p, v, false, false)
    }

    /// Kernelized attention with `phi = elu + 1` on `[n, d]` inputs.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, form: LinearAttentionForm) -> Result<Var> {
        check_qkv(self.value(q), self.value(k), self.value(v))?;
        let fq = self.elu_plus_one(q)?;
        let fk = self.elu_plus_one(k)?;
        match form {
            LinearAttentionForm::Literal => {
                let fv = self.elu_plus_one(v)?;
                let kv = self.matmul(fk, fv, true, false)?;
                self.matmul(fq, kv, false, false)
            }
            LinearAttentionForm::Normalized => {
                let kv = self.matmul(fk, v, true, false)?;
                let num = self.matmul(fq, kv, false, false)?;
                let ksum = self.sum_axis(fk, 0)?;
                let den = self.matmul(fq, ksum, false, true)?;
                self.div(num, den)
            }
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter-dependent node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.ng(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape must equal value shape");
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(self.value(x), self.value(w), b.is_some(), stride, pad, g)?;
                self.acc(grads, x, gx);
                self.acc(grads, w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.acc(grads, b, gb);
                }
            }
            &Op::Depthwise { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    depthwise_conv2d_backward(self.value(x), self.value(w), b.is_some(), stride, pad, g)?;
                self.acc(grads, x, gx);
                self.acc(grads, w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.acc(grads, b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = maxpool2d_backward(self.shape(*x), argmax, g);
                self.acc(grads, *x, gx);
            }
            &Op::Binary { op, a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let sa = bcast_strides(ta.shape(), y.shape());
                let sb = bcast_strides(tb.shape(), y.shape());
                let mut ga = vec![T::zero(); ta.numel()];
                let mut gb = vec![T::zero(); tb.numel()];
                let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
                for_each_bcast(y.shape(), &sa, &sb, |o, i, j| {
                    let d = gd[o];
                    match op {
                        BinOp::Add => {
                            ga[i] += d;
                            gb[j] += d;
                        }
                        BinOp::Sub => {
                            ga[i] += d;
                            gb[j] -= d;
                        }
                        BinOp::Mul => {
                            ga[i] += d * bd[j];
                            gb[j] += d * ad[i];
                        }
                        BinOp::Div => {
                            ga[i] += d / bd[j];
                            gb[j] -= d * ad[i] / (bd[j] * bd[j]);
                        }
                    }
                });
                self.acc(grads, a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.acc(grads, b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            &Op::Scale { x, s } => self.acc(grads, x, g.map(|v| v * s)),
            &Op::AddScalar { x } => self.acc(grads, x, g.clone()),
            &Op::Relu { x } => {
                let gx = self.value(x).zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                self.acc(grads, x, gx);
            }
            &Op::EluPlusOne { x } => {
                let xt = self.value(x);
                let data = xt
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| if xv > T::zero() { gv } else { gv * yv })
                    .collect();
                self.acc(grads, x, Tensor::new(xt.shape().to_vec(), data)?);
            }
            &Op::Log { x, floor } => {
                let gx = self.value(x).zip_map(g, |xv, gv| if xv > floor { gv / xv } else { T::zero() })?;
                self.acc(grads, x, gx);
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = matmul_backward(self.value(a), self.value(b), ta, tb, g)?;
                self.acc(grads, a, ga);
                self.acc(grads, b, gb);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.acc(grads, *x, permute_tensor(g, &inv));
            }
            &Op::Reshape { x } => self.acc(grads, x, g.reshape(self.shape(x).to_vec())?),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let lo = (o * total + start) * inner;
                        part.extend_from_slice(&g.data()[lo..lo + len * inner]);
                    }
                    start += len;
                    self.acc(grads, v, Tensor::new(self.shape(v).to_vec(), part)?);
                }
            }
            &Op::Softmax { x, axis } => self.acc(grads, x, softmax_backward(y, axis, g)),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *y.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut gx = vec![T::zero(); y.numel()];
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let dn = T::lit(d as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..d {
                        let dh = gr[c] * gam[c];
                        s1 += dh;
                        s2 += dh * hr[c];
                        gg[c] += gr[c] * hr[c];
                        gbeta[c] += gr[c];
                    }
                    for c in 0..d {
                        let dh = gr[c] * gam[c];
                        gx[r * d + c] = rs * (dh - s1 / dn - hr[c] * s2 / dn);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
                self.acc(grads, *gamma, Tensor::new([d], gg)?);
                self.acc(grads, *beta, Tensor::new([d], gbeta)?);
            }
            &Op::Upsample { x, factor } => {
                self.acc(grads, x, bilinear_upsample_backward(self.shape(x), factor, g));
            }
            Op::Rotate { x, cos, sin } => {
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                for (p, (&c, &s)) in cos.iter().zip(sin).enumerate() {
                    let (g0, g1) = (gd[2 * p], gd[2 * p + 1]);
                    gx[2 * p] = c * g0 + s * g1;
                    gx[2 * p + 1] = c * g1 - s * g0;
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(self.shape(*x).to_vec());
                let gxd = gx.data_mut();
                for (k, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        gxd[i] += g.data()[k];
                    }
                }
                self.acc(grads, *x, gx);
            }
            &Op::Sum { x } => {
                let gv = g.data()[0];
                self.acc(grads, x, Tensor::full(self.shape(x).to_vec(), gv));
            }
            &Op::SumAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.acc(grads, x, Tensor::new(shape, gx)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::arange([2, 3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([3, 4], |i| (i[0] as f64 * 0.7 - i[1] as f64).sin()));
        let p = g.softmax(x, 1).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones([2]));
        let s = g.sum(c).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::Detached);
        let p = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(p), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn broadcast_channel_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::arange([2, 2, 2]));
        let s = g.param(Tensor::new([2, 1, 1], vec![2.0, -1.0]).unwrap());
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 4.0, 6.0, -4.0, -5.0, -6.0, -7.0]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), &[6.0, 22.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones([1]));
        let z = g.constant(Tensor::zeros([1]));
        assert_eq!(g.div(a, z).unwrap_err(), TensorError::NonFinite("div"));
    }

    #[test]
    fn concat_and_permute_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::arange([2, 3]));
        let b = g.constant(Tensor::arange([2, 1]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0, 1.0]);
        let t = g.permute(c, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[4, 2]);
        assert!(g.permute(c, &[0, 0]).is_err());
    }
}
