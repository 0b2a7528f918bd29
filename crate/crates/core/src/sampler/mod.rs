//! Token-by-token generation with a rectified-flow Euler solver,
//! classifier-free guidance, and rejection of the latest token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Error, Result};
use crate::generator::{Conditioning, FlowHead, Generator, KvWindowCache, Variant};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_start: f64,
    pub cfg_end: f64,
    pub target_len: usize,
    pub seed: u64,
    /// Scale on the initial noise.
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 100, cfg_start: 1.0, cfg_end: 1.0, target_len: 16, seed: 0, temperature: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.target_len == 0 {
            return Err(contract("n_steps and target_len must be at least 1"));
        }
        if !(self.cfg_start.is_finite() && self.cfg_end.is_finite() && self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(contract("guidance scales and temperature must be finite, temperature ≥ 0"));
        }
        Ok(())
    }

    /// Whether the unconditional branch is ever needed.
    pub fn guided(&self) -> bool {
        self.cfg_start != 1.0 || self.cfg_end != 1.0
    }
}

/// `v_u + ω·(v_c − v_u)`; exactly `v_c` at `ω = 1`.
pub fn cfg_velocity(v_c: &Tensor<f32>, v_u: &Tensor<f32>, omega: f64) -> Result<Tensor<f32>> {
    if v_c.shape() != v_u.shape() {
        return Err(shape_err("cfg_velocity", format!("{:?} vs {:?}", v_c.shape(), v_u.shape())));
    }
    if omega == 1.0 {
        return Ok(v_c.clone());
    }
    let w = omega as f32;
    Ok(Tensor::from_fn(v_c.shape().to_vec(), |i| {
        let (c, u) = (v_c.data()[i], v_u.data()[i]);
        u + w * (c - u)
    }))
}

/// Guidance scale at `position`, linear from `cfg_start` to `cfg_end`.
pub fn omega_at(position: usize, target_len: usize, cfg: &SamplerConfig) -> f64 {
    if target_len <= 1 {
        return cfg.cfg_end;
    }
    cfg.cfg_start + (cfg.cfg_end - cfg.cfg_start) * position as f64 / (target_len - 1) as f64
}

/// Forward Euler from `t = 0` to `t = 1` on the grid `t_k = k/n_steps`,
/// evaluating `field(y, t_k)` at the left endpoint.
pub fn euler_integrate(
    y0: Tensor<f32>,
    n_steps: usize,
    mut field: impl FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    if n_steps == 0 {
        return Err(contract("n_steps must be at least 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut y = y0;
    for k in 0..n_steps {
        let v = field(&y, k as f64 * dt)?;
        if v.shape() != y.shape() {
            return Err(shape_err("euler", format!("velocity {:?} for state {:?}", v.shape(), y.shape())));
        }
        let d = dt as f32;
        for (a, &b) in y.data_mut().iter_mut().zip(v.data()) {
            *a += d * b;
        }
        if !y.all_finite() {
            return Err(Error::Numeric(format!("non-finite flow state at step {k}")));
        }
    }
    Ok(y)
}

/// Standard-normal noise `[rows, cols]` scaled by `temperature`, drawn row-major.
pub fn draw_noise(rows: usize, cols: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn([rows, cols], |_| {
        let e: f64 = StandardNormal.sample(rng);
        (e * temperature) as f32
    })
}

/// Integrate the head's (guided) velocity from `y0` for conditions `z_c`
/// (and `z_u` for the unconditional branch when guiding).
pub fn euler_sample_token(
    head: &FlowHead,
    store: &ParamStore<f32>,
    z_c: &Tensor<f32>,
    z_u: Option<&Tensor<f32>>,
    omega: f64,
    n_steps: usize,
    y0: Tensor<f32>,
) -> Result<Tensor<f32>> {
    let b = z_c.dim(0);
    match z_u {
        Some(z_u) if omega != 1.0 => {
            let z = Tensor::concat(&[z_c, z_u], 0)?;
            euler_integrate(y0, n_steps, |y, t| {
                let yy = Tensor::concat(&[y, y], 0)?;
                let v = head.velocity(store, &yy, t, &z)?;
                cfg_velocity(&v.slice(0, 0, b)?, &v.slice(0, b, 2 * b)?, omega)
            })
        }
        _ => euler_integrate(y0, n_steps, |y, t| head.velocity(store, y, t, z_c)),
    }
}

/// Backbone conditions for one position.
#[derive(Clone, Debug)]
struct PositionZ {
    cond: Tensor<f32>,
    uncond: Option<Tensor<f32>>,
}

/// Everything needed to continue or roll back a generation.
///
/// The noise stream is `ChaCha8Rng::seed_from_u64(seed)`; each generated
/// token consumes `B × C′` standard normals in row-major order, and nothing
/// else draws from it.
#[derive(Clone, Debug)]
pub struct GenerationState {
    cfg: SamplerConfig,
    classes: Vec<usize>,
    channels: usize,
    tokens: Vec<Tensor<f32>>,
    cache: KvWindowCache<f32>,
    uncond_cache: Option<KvWindowCache<f32>>,
    /// Conditions of the latest accepted position, kept for rejection.
    last_z: Option<PositionZ>,
    /// Conditions for the next position when its input is already cached.
    pending_z: Option<PositionZ>,
    rng: ChaCha8Rng,
}

impl GenerationState {
    pub fn new(model: &Generator<f32>, classes: &[usize], cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mcfg = model.config();
        if classes.is_empty() {
            return Err(contract("need at least one sample"));
        }
        if let Some(c) = classes.iter().find(|&&c| c >= mcfg.n_classes) {
            return Err(contract(format!("class {c} outside [0, {})", mcfg.n_classes)));
        }
        if !mcfg.extrapolates() && cfg.target_len > mcfg.max_len {
            return Err(contract(format!(
                "baseline_2d has learned positions for {} tokens, asked for {}",
                mcfg.max_len, cfg.target_len
            )));
        }
        let b = classes.len();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            uncond_cache: cfg.guided().then(|| KvWindowCache::new(model, b)),
            cache: KvWindowCache::new(model, b),
            classes: classes.to_vec(),
            channels: mcfg.token_channels,
            tokens: Vec::new(),
            last_z: None,
            pending_z: None,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn next_position(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_done(&self) -> bool {
        self.tokens.len() >= self.cfg.target_len
    }

    /// Accepted token at `position`, `[B, C′]`.
    pub fn token(&self, position: usize) -> Option<&Tensor<f32>> {
        self.tokens.get(position)
    }

    /// All accepted tokens `[B, n, C′]`.
    pub fn tokens(&self) -> Result<Tensor<f32>> {
        let (b, c) = (self.classes.len(), self.channels);
        let n = self.tokens.len();
        let mut out = vec![0.0; b * n * c];
        for (p, t) in self.tokens.iter().enumerate() {
            for s in 0..b {
                out[(s * n + p) * c..(s * n + p + 1) * c].copy_from_slice(&t.data()[s * c..(s + 1) * c]);
            }
        }
        Tensor::new([b, n, c], out)
    }

    /// Positions currently held in the conditional KV cache.
    pub fn cached_positions(&self) -> &[usize] {
        self.cache.positions()
    }

    fn conditions(&mut self, model: &Generator<f32>) -> Result<PositionZ> {
        let pos = self.tokens.len();
        let b = self.classes.len();
        let shifts = vec![0; b];
        let cond: Vec<Option<usize>> = self.classes.iter().map(|&c| Some(c)).collect();
        let null = vec![None; b];
        if model.config().variant == Variant::RealEquivariant {
            return self.crop_conditions(model, &cond, &null, &shifts);
        }
        let input = pos.checked_sub(1).map(|p| &self.tokens[p]);
        let z_c = model.step(&mut self.cache, input, &Conditioning::new(&cond, &shifts))?;
        let uncond = match self.uncond_cache.as_mut() {
            Some(cache) => Some(model.step(cache, input, &Conditioning::new(&null, &shifts))?),
            None => None,
        };
        Ok(PositionZ { cond: z_c, uncond })
    }

    /// Crop-trained models see exactly the context they were trained on:
    /// the last `k + 1` inputs at crop-local positions.
    fn crop_conditions(
        &self,
        model: &Generator<f32>,
        cond: &[Option<usize>],
        null: &[Option<usize>],
        shifts: &[usize],
    ) -> Result<PositionZ> {
        let pos = self.tokens.len();
        let k = model.config().window_w;
        let b = self.classes.len();
        let c = model.config().token_channels;
        let (start, bos) = if pos <= k { (0, true) } else { (pos - k - 1, false) };
        let m = pos - start;
        let mut inputs = vec![0.0; b * m * c];
        for (j, t) in self.tokens[start..pos].iter().enumerate() {
            for s in 0..b {
                inputs[(s * m + j) * c..(s * m + j + 1) * c].copy_from_slice(&t.data()[s * c..(s + 1) * c]);
            }
        }
        let inputs = Tensor::new([b, m, c], inputs)?;
        let run = |classes: &[Option<usize>]| -> Result<Tensor<f32>> {
            let mut tape = Tape::new();
            let z = model.forward(&mut tape, &inputs, bos, 0, &Conditioning::new(classes, shifts))?;
            let z = tape.value(z);
            let n = z.dim(1);
            z.slice(1, n - 1, n)?.into_reshape([b, model.config().hidden_dim])
        };
        let uncond = if self.cfg.guided() { Some(run(null)?) } else { None };
        Ok(PositionZ { cond: run(cond)?, uncond })
    }

    fn draw_token(&mut self, model: &Generator<f32>, z: &PositionZ) -> Result<Tensor<f32>> {
        let pos = self.tokens.len();
        let omega = omega_at(pos, self.cfg.target_len, &self.cfg);
        let y0 = draw_noise(self.classes.len(), model.config().token_channels, self.cfg.temperature, &mut self.rng);
        euler_sample_token(&model.head, &model.store, &z.cond, z.uncond.as_ref(), omega, self.cfg.n_steps, y0)
    }

    /// Generate and accept the token at the next position, `[B, C′]`.
    pub fn step(&mut self, model: &Generator<f32>) -> Result<Tensor<f32>> {
        if self.is_done() {
            return Err(contract(format!("generation already has {} tokens", self.cfg.target_len)));
        }
        let z = match self.pending_z.take() {
            Some(z) => z,
            None => self.conditions(model)?,
        };
        let token = self.draw_token(model, &z)?;
        self.tokens.push(token.clone());
        self.last_z = Some(z);
        Ok(token)
    }

    /// Drop the latest token. A token enters the caches only when the
    /// following position is generated, so the caches already match the
    /// remaining prefix; the dropped position's conditions are kept so the
    /// next [`step`](Self::step) redraws only the head noise.
    pub fn reject(&mut self) -> Result<()> {
        let z = self.last_z.clone().ok_or_else(|| contract("nothing to reject"))?;
        if self.tokens.pop().is_none() {
            return Err(contract("nothing to reject"));
        }
        self.pending_z = Some(z);
        // A second reject in a row would need the conditions one further back.
        self.last_z = None;
        Ok(())
    }

    /// Replace the latest token with a fresh draw at the same position.
    pub fn resample(&mut self, model: &Generator<f32>) -> Result<Tensor<f32>> {
        self.reject()?;
        self.step(model)
    }
}

/// Run the autoregressive loop to `cfg.target_len` tokens; returns
/// `[B, target_len, C′]` and the final state.
pub fn generate_sequence(model: &Generator<f32>, classes: &[usize], cfg: &SamplerConfig) -> Result<(Tensor<f32>, GenerationState)> {
    let mut state = GenerationState::new(model, classes, cfg.clone())?;
    while !state.is_done() {
        state.step(model)?;
    }
    Ok((state.tokens()?, state))
}

/// [`generate_sequence`] past the training length; refused for models
/// without relative positions.
pub fn extrapolate_long(model: &Generator<f32>, classes: &[usize], cfg: &SamplerConfig) -> Result<Tensor<f32>> {
    if !model.config().extrapolates() {
        return Err(contract(format!("{:?} cannot generate beyond its trained length", model.config().variant)));
    }
    Ok(generate_sequence(model, classes, cfg)?.0)
}

/// Replace the latest token of `state` (see [`GenerationState::resample`]).
pub fn resample_token(model: &Generator<f32>, state: &mut GenerationState) -> Result<Tensor<f32>> {
    state.resample(model)
}
