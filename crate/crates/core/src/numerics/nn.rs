//! Parameterised building blocks recorded onto a [`Tape`].

use rand::Rng;

use super::{Float, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_std(store, name, in_dim, out_dim, bias, INIT_STD, rng)
    }

    pub fn with_std<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_trunc_normal(format!("{name}.weight"), [in_dim, out_dim], std, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), [out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add_ones(format!("{name}.gain"), [dim]);
        let bias = store.add_zeros(format!("{name}.bias"), [dim]);
        Self { gain, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, NORM_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

/// Channel-group normalisation evaluated independently at every spatial
/// location of a `[B, H, W, C]` map. Statistics never mix pixels, so a
/// stack of these keeps each output's receptive field finite.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        let gain = store.add_ones(format!("{name}.gain"), [channels]);
        let bias = store.add_zeros(format!("{name}.bias"), [channels]);
        Self { groups, channels, gain, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let mut grouped = shape[..shape.len() - 1].to_vec();
        grouped.extend([self.groups, self.channels / self.groups]);
        let y = tape.reshape(x, grouped)?;
        let y = tape.layer_norm(y, NORM_EPS)?;
        let y = tape.reshape(y, shape)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(y, g)?;
        tape.add(y, b)
    }
}

/// Square convolution on `[B, H, W, C]` maps with reflect padding of `k/2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub proj: Linear,
}

impl Conv2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // fan-in scaled init keeps activations O(1) through the stack
        let std = (1.0 / (kernel * kernel * in_ch) as f64).sqrt();
        let proj = Linear::with_std(store, name, kernel * kernel * in_ch, out_ch, true, std, rng);
        Self { kernel, stride, proj }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let x = if pad > 0 { tape.reflect_pad(x, pad)? } else { x };
        let cols = tape.im2col(x, self.kernel, self.stride)?;
        self.proj.forward(tape, store, cols)
    }
}
