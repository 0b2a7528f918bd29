use super::float::Float;
use crate::error::{shape_err, Result};

/// Dense row-major array. Values are immutable once built; every operation
/// returns a fresh tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {:?} for shape {:?}", axes, self.shape)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(self.data[off]);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Swap the two innermost axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err("transpose", format!("{:?}", self.shape)));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {} range {}..{} of shape {:?}", axis, start, end, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let r = first.rank();
        if axis >= r {
            return Err(shape_err("concat", format!("axis {} of shape {:?}", axis, first.shape)));
        }
        for p in parts {
            let ok = p.rank() == r
                && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", first.shape, p.shape, axis)));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Gather entries `indices` along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() || indices.iter().any(|&i| i >= self.shape[axis]) {
            return Err(shape_err(
                "index_select",
                format!("axis {} indices {:?} of shape {:?}", axis, indices, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                data.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data })
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]`. The right operand
    /// may also be a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (batch, m, k, n, shared) = matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            T::gemm(batch * m, k, n, &self.data, k as isize, 1, &rhs.data, n as isize, 1, &mut out, T::zero());
        } else {
            for b in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &self.data[b * m * k..],
                    k as isize,
                    1,
                    &rhs.data[b * k * n..],
                    n as isize,
                    1,
                    &mut out[b * m * n..],
                    T::zero(),
                );
            }
        }
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        shape.push(n);
        Ok(Self { shape, data: out })
    }

    fn check_suffix(&self, rhs: &Self, op: &'static str) -> Result<()> {
        let r = rhs.rank();
        if r > self.rank() || self.shape[self.rank() - r..] != rhs.shape[..] {
            return Err(shape_err(op, format!("{:?} with {:?}", self.shape, rhs.shape)));
        }
        Ok(())
    }

    fn zip_suffix(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_suffix(rhs, op)?;
        let n = rhs.numel();
        let data = self
            .data
            .chunks(n.max(1))
            .flat_map(|c| c.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Elementwise sum; `rhs` broadcasts when its shape is a suffix of ours.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_suffix(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_suffix(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_suffix(rhs, "mul", |a, b| a * b)
    }

    /// Reduce a gradient over the leading axes so it matches a suffix shape.
    pub fn sum_to_suffix(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        let mut data = vec![T::zero(); n];
        for chunk in self.data.chunks(n.max(1)) {
            for (d, &v) in data.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn softmax_lastdim(&self) -> Result<Self> {
        let n = *self.shape.last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Normalise each last-axis slice to zero mean, unit variance. Returns the
    /// output and the per-slice reciprocal standard deviations.
    pub fn layer_norm_lastdim(&self, eps: T) -> Result<(Self, Vec<T>)> {
        let n = *self.shape.last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        let nf = T::lit(n as f64);
        let mut data = self.data.clone();
        let mut rstds = Vec::with_capacity(self.numel() / n.max(1));
        for row in data.chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        Ok((Self { shape: self.shape.clone(), data }, rstds))
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_lastdim(&self) -> Result<Self> {
        let n = *self.shape.last().ok_or_else(|| shape_err("mean_lastdim", "rank 0"))?;
        let nf = T::lit(n as f64);
        let data = self.data.chunks(n.max(1)).map(|c| c.iter().copied().sum::<T>() / nf).collect();
        Ok(Self { shape: self.shape[..self.rank() - 1].to_vec(), data })
    }
}

/// (batch, m, k, n, rhs_shared)
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let err = || shape_err("matmul", format!("{:?} x {:?}", a, b));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        return Ok((batch, m, k, n, true));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    Ok((batch, m, k, n, false))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}
