//! Flow-matching head and its training objective.
//!
//! The head regresses the straight-path velocity `x − ε` at the interpolated
//! state `t·x + (1 − t)·ε`, conditioned on the backbone output `z`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attention::sinusoidal;
use super::config::GeneratorConfig;
use crate::error::{contract, shape_err, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{Float, ParamStore, Tape, Tensor, Var};

/// Noise levels are scaled by this before the sinusoidal embedding so the
/// low frequencies resolve `t ∈ [0, 1]`.
const T_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct FlowHead {
    layers: Vec<Linear>,
    out: Linear,
    t_dim: usize,
    channels: usize,
    z_dim: usize,
}

impl FlowHead {
    pub(crate) fn new<T: Float>(store: &mut ParamStore<T>, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let h = &cfg.head;
        let mut in_dim = cfg.token_channels + h.t_embed_dim + cfg.hidden_dim;
        let mut layers = Vec::with_capacity(h.mlp_layers);
        for i in 0..h.mlp_layers {
            layers.push(Linear::new(store, &format!("head.fc{i}"), in_dim, h.mlp_hidden, true, rng));
            in_dim = h.mlp_hidden;
        }
        let out = Linear::new(store, "head.out", in_dim, cfg.token_channels, true, rng);
        Self { layers, out, t_dim: h.t_embed_dim, channels: cfg.token_channels, z_dim: cfg.hidden_dim }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Velocity `[N, C′]` for noised tokens `y` `[N, C′]`, levels `t` and
    /// conditions `z` `[N, d]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var, t: &[f64], z: Var) -> Result<Var> {
        let n = t.len();
        if tape.shape(y) != [n, self.channels] || tape.shape(z) != [n, self.z_dim] {
            return Err(shape_err(
                "flow_head",
                format!("y {:?}, z {:?} for {n} levels, expected [{n}, {}] and [{n}, {}]", tape.shape(y), tape.shape(z), self.channels, self.z_dim),
            ));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(contract(format!("noise level {bad} outside [0, 1]")));
        }
        let temb: Vec<T> = t.iter().flat_map(|&t| sinusoidal(t * T_SCALE, self.t_dim)).map(T::lit).collect();
        let temb = tape.leaf(Tensor::new([n, self.t_dim], temb)?);
        let mut x = tape.concat(&[y, temb, z], 1)?;
        for l in &self.layers {
            let a = l.forward(tape, store, x)?;
            x = tape.gelu(a);
        }
        self.out.forward(tape, store, x)
    }

    /// Tape-free evaluation with a single noise level for every row.
    pub fn velocity<T: Float>(&self, store: &ParamStore<T>, y: &Tensor<T>, t: f64, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let yv = tape.leaf(y.clone());
        let zv = tape.leaf(z.clone());
        let out = self.forward(&mut tape, store, yv, &vec![t; y.dim(0)], zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Noised inputs and regression targets for a set of clean tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    /// `t·x + (1 − t)·ε`, `[N, C′]`.
    pub y: Tensor<T>,
    pub t: Vec<f64>,
    /// `x − ε`, `[N, C′]`.
    pub target: Tensor<T>,
}

impl<T: Float> FlowSample<T> {
    /// Build from explicit noise `eps` `[N, C′]` and levels `t`.
    pub fn from_parts(x: &Tensor<T>, eps: &Tensor<T>, t: Vec<f64>) -> Result<Self> {
        if x.rank() != 2 || x.shape() != eps.shape() || t.len() != x.dim(0) {
            return Err(shape_err("flow_sample", format!("x {:?}, eps {:?}, {} levels", x.shape(), eps.shape(), t.len())));
        }
        let c = x.dim(1);
        let y = Tensor::from_fn(x.shape().to_vec(), |i| {
            let tt = T::lit(t[i / c]);
            tt * x.data()[i] + (T::one() - tt) * eps.data()[i]
        });
        let target = x.sub(eps)?;
        Ok(Self { y, t, target })
    }

    /// Fresh `ε ~ N(0, I)` and `t ~ U(0, 1)` per row.
    pub fn draw(x: &Tensor<T>, rng: &mut impl Rng) -> Result<Self> {
        let (n, c) = (x.dim(0), x.dim(1));
        let mut eps = Vec::with_capacity(n * c);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.random::<f64>());
            for _ in 0..c {
                let e: f64 = StandardNormal.sample(rng);
                eps.push(T::lit(e));
            }
        }
        Self::from_parts(x, &Tensor::new([n, c], eps)?, t)
    }

    /// Per-row `‖v − (x − ε)‖²` for a predicted velocity.
    pub fn row_losses(&self, v: &Tensor<T>) -> Result<Vec<f64>> {
        let d = v.sub(&self.target)?;
        Ok(d.data().chunks(self.target.dim(1)).map(|r| r.iter().map(|e| e.as_f64().powi(2)).sum()).collect())
    }
}

/// Per-row `‖D(y, t, z) − (x − ε)‖²` `[N]` for clean rows `x` `[N, C′]` and
/// conditions `z` `[N, d]`, with fresh `ε` and `t` per row.
pub fn flow_row_losses<T: Float>(
    tape: &mut Tape<T>,
    head: &FlowHead,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    z: Var,
    rng: &mut impl Rng,
) -> Result<Var> {
    let sample = FlowSample::draw(x, rng)?;
    let y = tape.leaf(sample.y.clone());
    let v = head.forward(tape, store, y, &sample.t, z)?;
    let target = tape.leaf(sample.target);
    let diff = tape.sub(v, target)?;
    let sq = tape.mul(diff, diff)?;
    let rows = tape.mean_lastdim(sq)?;
    Ok(tape.scale(rows, T::lit(x.dim(1) as f64)))
}

/// Result of [`flow_matching_loss`].
#[derive(Debug)]
pub struct FlowLoss {
    /// Mean over masked rows of `‖D(y, t, z) − (x − ε)‖²`.
    pub loss: Var,
    /// Batch-mean loss at every sequence position, masked or not.
    pub per_position: Vec<f64>,
}

/// Flow-matching objective over `x` `[B, n, C′]` with conditions `z` `[B, n, d]`.
/// Only positions with `mask[i]` contribute to `loss`; the rest share the
/// same noise draws and are reported in `per_position` without feeding the
/// gradient.
pub fn flow_matching_loss<T: Float>(
    tape: &mut Tape<T>,
    head: &FlowHead,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    z: Var,
    mask: &[bool],
    rng: &mut impl Rng,
) -> Result<FlowLoss> {
    let zs = tape.shape(z).to_vec();
    if x.rank() != 3 || zs.len() != 3 || x.shape()[..2] != zs[..2] || mask.len() != x.dim(1) {
        return Err(shape_err(
            "flow_matching_loss",
            format!("x {:?}, z {:?}, mask of {}", x.shape(), zs, mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(contract("loss mask selects no position"));
    }
    let (b, n, c) = (x.dim(0), x.dim(1), x.dim(2));
    let flat = x.reshape([b * n, c])?;
    let zf = tape.reshape(z, [b * n, zs[2]])?;
    let rows = flow_row_losses(tape, head, store, &flat, zf, rng)?;

    let row_vals = tape.value(rows).to_f64_vec();
    let mut per_position = vec![0.0; n];
    for (i, l) in row_vals.iter().enumerate() {
        per_position[i % n] += l / b as f64;
    }

    let loss = if mask.iter().all(|&m| m) {
        tape.mean(rows)
    } else {
        let keep: Vec<usize> = (0..b * n).filter(|i| mask[i % n]).collect();
        let sel = tape.index_select(rows, 0, &keep)?;
        tape.mean(sel)
    };
    Ok(FlowLoss { loss, per_position })
}
