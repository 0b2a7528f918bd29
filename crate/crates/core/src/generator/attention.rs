//! Attention primitives: masks, rotary tables, multi-head split/merge.

use crate::error::{contract, Result};
use crate::numerics::{Float, Tape, Tensor, Var};

/// Which keys a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionWindow {
    /// All predecessors and self.
    Full,
    /// Self plus up to `w` predecessors.
    Window(usize),
}

impl AttentionWindow {
    pub fn allows(self, query: usize, key: usize) -> bool {
        key <= query
            && match self {
                Self::Full => true,
                Self::Window(w) => query - key <= w,
            }
    }

    /// Additive mask `[n, n]`: 0 where allowed, −∞ elsewhere.
    pub fn mask<T: Float>(self, n: usize) -> Tensor<T> {
        Tensor::from_fn([n, n], |i| if self.allows(i / n, i % n) { T::zero() } else { T::neg_infinity() })
    }

    /// Most cached keys a single query ever needs besides its own.
    pub fn cache_capacity(self) -> Option<usize> {
        match self {
            Self::Full => None,
            Self::Window(w) => Some(w),
        }
    }
}

/// Cos/sin tables of shape `seq × dim/2` for positions `pos0..pos0+seq`.
/// Angle for pair `j` at position `p` is `p·base^(−2j/dim)`, computed in f64.
pub fn rotary_tables<T: Float>(positions: impl IntoIterator<Item = usize>, dim: usize, base: f64) -> Result<(Vec<T>, Vec<T>)> {
    if dim % 2 != 0 {
        return Err(contract(format!("rotary needs an even head dim, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|j| base.powf(-((2 * j) as f64) / dim as f64)).collect();
    let (mut cos, mut sin) = (Vec::new(), Vec::new());
    for p in positions {
        for &f in &freqs {
            let a = p as f64 * f;
            cos.push(T::lit(a.cos()));
            sin.push(T::lit(a.sin()));
        }
    }
    Ok((cos, sin))
}

/// Rotate one `[..., seq, dim]` tensor outside the tape.
pub fn rotary_apply<T: Float>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let dim = *x.shape().last().unwrap_or(&0);
    let (cos, sin) = rotary_tables(positions.iter().copied(), dim, base)?;
    crate::numerics::rotate_pairs(x, &cos, &sin, false)
}

/// Sinusoidal embedding `[sin(p·ω_i), cos(p·ω_i)]` with `ω_i = 10000^(−i/half)`.
pub fn sinusoidal(p: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (p * w).sin();
        out[half + i] = (p * w).cos();
    }
    out
}

/// `[B, n, H·dh]` → `[B, H, n, dh]`.
pub(crate) fn split_heads<T: Float>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, [b, n, heads, d / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// `[B, H, n, dh]` → `[B, n, H·dh]`.
pub(crate) fn merge_heads<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, [b, n, h * dh])
}

/// Scaled dot-product attention over `[B, H, n, dh]` operands with an
/// optional additive `[nq, nk]` mask.
pub(crate) fn attend<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dh = *tape.shape(q).last().expect("rank 4");
    let kt = tape.transpose_last2(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, T::lit(1.0 / (dh as f64).sqrt()));
    let s = match mask {
        Some(m) => tape.add(s, m)?,
        None => s,
    };
    let p = tape.softmax_lastdim(s)?;
    tape.matmul(p, v)
}

/// Multi-head attention over `[B, H, n, dh]` tensors with causal `window`;
/// rotary positions `0..n` are applied to `q` and `k` when `rotary_base` is set.
pub fn windowed_causal_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: AttentionWindow,
    rotary_base: Option<f64>,
) -> Result<Tensor<T>> {
    if q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(crate::error::shape_err("attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let n = q.dim(2);
    let mut tape = Tape::new();
    let (mut qv, mut kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
    if let Some(base) = rotary_base {
        let (cos, sin) = rotary_tables(0..n, q.dim(3), base)?;
        qv = tape.rotary(qv, cos.clone(), sin.clone())?;
        kv = tape.rotary(kv, cos, sin)?;
    }
    let vv = tape.leaf(v.clone());
    let mask = tape.leaf(window.mask(n));
    let out = attend(&mut tape, qv, kv, vv, Some(mask))?;
    Ok(tape.value(out).clone())
}
