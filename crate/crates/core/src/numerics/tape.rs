//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] consumes it and sweeps the recorded nodes in reverse,
//! producing first-order gradients for every leaf.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gelu_grad, matmul_dims};
use super::{Float, Tensor};
use crate::error::{contract, shape_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Exp(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    MeanLast(Var),
    Rotary { x: Var, cos: Vec<T>, sin: Vec<T> },
    ReflectPad { x: Var, pad: usize },
    Im2Col { x: Var, k: usize, stride: usize },
    Upsample2x(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    /// Input or constant. Receives a gradient like any other leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec())))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice(axis, start, end)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).index_select(axis, indices)?;
        Ok(self.push(out, Op::IndexSelect { x: a, axis, indices: indices.to_vec() }))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_lastdim()?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Affine-free layer norm over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (out, rstd) = self.value(a).layer_norm_lastdim(T::lit(eps))?;
        Ok(self.push(out, Op::LayerNorm { x: a, rstd }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        self.push(out, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp { x: a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_sq());
        self.push(out, Op::SumSq(a))
    }

    pub fn mean_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_lastdim()?;
        Ok(self.push(out, Op::MeanLast(a)))
    }

    /// Rotate consecutive feature pairs of a `[..., seq, dim]` tensor.
    /// `cos`/`sin` are `seq × dim/2` tables.
    pub fn rotary(&mut self, a: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let out = rotate_pairs(self.value(a), &cos, &sin, false)?;
        Ok(self.push(out, Op::Rotary { x: a, cos, sin }))
    }

    /// Reflect-pad both spatial axes of a `[B, H, W, C]` tensor.
    pub fn reflect_pad(&mut self, a: Var, pad: usize) -> Result<Var> {
        let out = reflect_pad(self.value(a), pad)?;
        Ok(self.push(out, Op::ReflectPad { x: a, pad }))
    }

    /// Unfold `k×k` patches of a `[B, H, W, C]` tensor into `[B, Ho, Wo, k·k·C]`.
    pub fn im2col(&mut self, a: Var, k: usize, stride: usize) -> Result<Var> {
        let out = im2col(self.value(a), k, stride)?;
        Ok(self.push(out, Op::Im2Col { x: a, k, stride }))
    }

    /// Nearest-neighbour ×2 upsampling of a `[B, H, W, C]` tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let out = upsample2x(self.value(a))?;
        Ok(self.push(out, Op::Upsample2x(a)))
    }

    /// Sweep the tape backwards from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, params: self.params })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (da, db) = matmul_backward(val(*a), val(*b), g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *b, g.sum_to_suffix(val(*b).shape()));
                accumulate(grads, *a, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.sum_to_suffix(val(*b).shape()).scale(-T::one()));
                accumulate(grads, *a, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                accumulate(grads, *a, g.mul(bv)?);
                let gb = zip(g, av, |x, y| x * y);
                accumulate(grads, *b, gb.sum_to_suffix(bv.shape()));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape().to_vec())?),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let mut full = Tensor::zeros(xs.to_vec());
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (len, sl) = (xs[*axis], g.shape()[*axis]);
                let fd = full.data_mut();
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * sl * inner;
                    fd[dst..dst + sl * inner].copy_from_slice(&g.data()[src..src + sl * inner]);
                }
                accumulate(grads, *x, full);
            }
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    accumulate(grads, *p, g.slice(*axis, off, off + len)?);
                    off += len;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let xs = val(*x).shape();
                let mut full = Tensor::zeros(xs.to_vec());
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = xs[*axis];
                let fd = full.data_mut();
                for o in 0..outer {
                    for (j, &src_i) in indices.iter().enumerate() {
                        let dst = (o * len + src_i) * inner;
                        let src = (o * indices.len() + j) * inner;
                        for t in 0..inner {
                            fd[dst + t] += g.data()[src + t];
                        }
                    }
                }
                accumulate(grads, *x, full);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut dx = g.clone();
                for (row, y) in dx.data_mut().chunks_mut(n.max(1)).zip(out.data().chunks(n.max(1))) {
                    let dot: T = row.iter().zip(y).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in row.iter_mut().zip(y) {
                        *d = p * (*d - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, rstd } => {
                let n = *out.shape().last().unwrap_or(&1);
                let nf = T::lit(n as f64);
                let mut dx = g.clone();
                for ((row, xh), &r) in dx.data_mut().chunks_mut(n.max(1)).zip(out.data().chunks(n.max(1))).zip(rstd) {
                    let mean_g = row.iter().copied().sum::<T>() / nf;
                    let mean_gx = row.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / nf;
                    for (d, &h) in row.iter_mut().zip(xh) {
                        *d = r * (*d - mean_g - h * mean_gx);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(a) => accumulate(grads, *a, zip(g, val(*a), |d, x| d * gelu_grad(x))),
            Op::Exp(a) => accumulate(grads, *a, zip(g, out, |d, y| d * y)),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                accumulate(grads, *x, zip(g, val(*x), |d, v| if v >= lo && v <= hi { d } else { T::zero() }));
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let v = val(*a);
                let s = g.item() / T::lit(v.numel() as f64);
                accumulate(grads, *a, Tensor::full(v.shape().to_vec(), s));
            }
            Op::SumSq(a) => {
                let s = g.item() * T::lit(2.0);
                accumulate(grads, *a, val(*a).scale(s));
            }
            Op::MeanLast(a) => {
                let v = val(*a);
                let n = *v.shape().last().unwrap_or(&1);
                let inv = T::one() / T::lit(n as f64);
                let data = g.data().iter().flat_map(|&d| std::iter::repeat_n(d * inv, n)).collect();
                accumulate(grads, *a, Tensor::new(v.shape().to_vec(), data)?);
            }
            Op::Rotary { x, cos, sin } => accumulate(grads, *x, rotate_pairs(g, cos, sin, true)?),
            Op::ReflectPad { x, pad } => accumulate(grads, *x, reflect_pad_backward(g, val(*x).shape(), *pad)),
            Op::Im2Col { x, k, stride } => accumulate(grads, *x, im2col_backward(g, val(*x).shape(), *k, *stride)),
            Op::Upsample2x(a) => accumulate(grads, *a, upsample2x_backward(g, val(*a).shape())),
        }
        Ok(())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn matmul_backward<T: Float>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape())?;
    let mut da = vec![T::zero(); batch * m * k];
    let mut db = vec![T::zero(); b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if shared {
        let rows = batch * m;
        // da = g · bᵀ
        T::gemm(rows, n, k, gd, n as isize, 1, bd, 1, n as isize, &mut da, T::zero());
        // db = aᵀ · g
        T::gemm(k, rows, n, ad, 1, k as isize, gd, n as isize, 1, &mut db, T::zero());
    } else {
        for bi in 0..batch {
            let (ao, bo, go) = (bi * m * k, bi * k * n, bi * m * n);
            T::gemm(m, n, k, &gd[go..], n as isize, 1, &bd[bo..], 1, n as isize, &mut da[ao..], T::zero());
            T::gemm(k, m, n, &ad[ao..], 1, k as isize, &gd[go..], n as isize, 1, &mut db[bo..], T::zero());
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), da)?, Tensor::new(b.shape().to_vec(), db)?))
}

pub(crate) fn rotate_pairs<T: Float>(x: &Tensor<T>, cos: &[T], sin: &[T], inverse: bool) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 1] % 2 != 0 {
        return Err(shape_err("rotary", format!("needs [..., seq, even dim], got {:?}", x.shape())));
    }
    let (seq, dim) = (x.shape()[r - 2], x.shape()[r - 1]);
    let half = dim / 2;
    if cos.len() != seq * half || sin.len() != seq * half {
        return Err(shape_err("rotary", format!("table {} for seq {} × {} pairs", cos.len(), seq, half)));
    }
    let mut out = x.clone();
    for block in out.data_mut().chunks_mut(seq * dim) {
        for s in 0..seq {
            for j in 0..half {
                let (c, sn) = (cos[s * half + j], sin[s * half + j]);
                let sn = if inverse { -sn } else { sn };
                let i0 = s * dim + 2 * j;
                let (x0, x1) = (block[i0], block[i0 + 1]);
                block[i0] = x0 * c - x1 * sn;
                block[i0 + 1] = x0 * sn + x1 * c;
            }
        }
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    j as usize
}

fn spatial_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(shape_err(op, format!("expected [B, H, W, C], got {:?}", shape))),
    }
}

fn reflect_pad<T: Float>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = spatial_dims(x.shape(), "reflect_pad")?;
    if p >= h || p >= w {
        return Err(shape_err("reflect_pad", format!("pad {} too large for {:?}", p, x.shape())));
    }
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut out = Vec::with_capacity(b * ho * wo * c);
    let xd = x.data();
    for bi in 0..b {
        for y in 0..ho {
            let sy = reflect(y as isize - p as isize, h);
            for xx in 0..wo {
                let sx = reflect(xx as isize - p as isize, w);
                let s = ((bi * h + sy) * w + sx) * c;
                out.extend_from_slice(&xd[s..s + c]);
            }
        }
    }
    Tensor::new([b, ho, wo, c], out)
}

fn reflect_pad_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], p: usize) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let d = dx.data_mut();
    let gd = g.data();
    for bi in 0..b {
        for y in 0..ho {
            let sy = reflect(y as isize - p as isize, h);
            for xx in 0..wo {
                let sx = reflect(xx as isize - p as isize, w);
                let s = ((bi * h + sy) * w + sx) * c;
                let o = ((bi * ho + y) * wo + xx) * c;
                for ch in 0..c {
                    d[s + ch] += gd[o + ch];
                }
            }
        }
    }
    dx
}

fn conv_out(n: usize, k: usize, stride: usize) -> usize {
    (n - k) / stride + 1
}

fn im2col<T: Float>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = spatial_dims(x.shape(), "im2col")?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(shape_err("im2col", format!("kernel {} stride {} on {:?}", k, stride, x.shape())));
    }
    let (ho, wo) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let cols = k * k * c;
    let mut out = Vec::with_capacity(b * ho * wo * cols);
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    let s = ((bi * h + oy * stride + ky) * w + ox * stride) * c;
                    out.extend_from_slice(&xd[s..s + k * c]);
                }
            }
        }
    }
    Tensor::new([b, ho, wo, cols], out)
}

fn im2col_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], k: usize, stride: usize) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (conv_out(h, k, stride), conv_out(w, k, stride));
    let cols = k * k * c;
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let d = dx.data_mut();
    let gd = g.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = ((bi * ho + oy) * wo + ox) * cols;
                for ky in 0..k {
                    let s = ((bi * h + oy * stride + ky) * w + ox * stride) * c;
                    let gs = go + ky * k * c;
                    for t in 0..k * c {
                        d[s + t] += gd[gs + t];
                    }
                }
            }
        }
    }
    dx
}

fn upsample2x<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = spatial_dims(x.shape(), "upsample2x")?;
    let mut out = Vec::with_capacity(b * 4 * h * w * c);
    let xd = x.data();
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let s = ((bi * h + y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&xd[s..s + c]);
            }
        }
    }
    Tensor::new([b, 2 * h, 2 * w, c], out)
}

fn upsample2x_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let d = dx.data_mut();
    let gd = g.data();
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let s = ((bi * h + y / 2) * w + xx / 2) * c;
                let o = ((bi * 2 * h + y) * 2 * w + xx) * c;
                for ch in 0..c {
                    d[s + ch] += gd[o + ch];
                }
            }
        }
    }
    dx
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to any recorded node; zeros if the node did
    /// not contribute to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// One gradient per stored parameter, in store order.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(&v) => self.wrt(v),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}
