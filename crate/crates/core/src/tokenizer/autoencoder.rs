//! Convolutional autoencoder whose bottleneck is a column token sequence.
//!
//! Encoder: conv stack with reflect padding and stride-2 stages, then the
//! column flatten and a projection to `(mu, log_var)`. Decoder: projection
//! back to `H′·C`, column unflatten, and a mirrored conv stack with nearest
//! upsampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::columns::{column_flatten_var, column_unflatten_var};
use crate::error::{contract, Result};
use crate::numerics::nn::{Conv2d, GroupNorm, Linear};
use crate::numerics::{AdamW, AdamWConfig, Float, ParamStore, Tape, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Product of encoder strides; a power of two.
    pub downsample_f: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub token_channels: usize,
    pub groups: usize,
    pub lambda_rec: f64,
    pub lambda_reg: f64,
    /// Weights of the perceptual, adversarial and alignment terms. Kept for
    /// config compatibility; those losses are not computed here.
    pub lambda_perceptual: f64,
    pub lambda_gan: f64,
    pub lambda_align: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            downsample_f: 4,
            base_channels: 32,
            latent_channels: 16,
            token_channels: 16,
            groups: 8,
            lambda_rec: 1.0,
            lambda_reg: 0.01,
            lambda_perceptual: 1.0,
            lambda_gan: 0.5,
            lambda_align: 5.0,
        }
    }
}

impl TokenizerConfig {
    /// 256×256 images, f = 16, 16 tokens of 256 channels.
    pub fn full_scale() -> Self {
        Self {
            image_h: 256,
            image_w: 256,
            downsample_f: 16,
            base_channels: 128,
            latent_channels: 32,
            token_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_f;
        if f == 0 || !f.is_power_of_two() {
            return Err(contract(format!("downsample_f {f} must be a power of two")));
        }
        if self.image_h % f != 0 || self.image_w % f != 0 {
            return Err(contract(format!("{}×{} image not divisible by f = {f}", self.image_h, self.image_w)));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 || self.latent_channels == 0 || self.token_channels == 0 {
            return Err(contract("channel counts must be positive and divisible by groups"));
        }
        let lambdas = [self.lambda_rec, self.lambda_reg, self.lambda_perceptual, self.lambda_gan, self.lambda_align];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(contract("loss weights must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Number of tokens `W = image_w / f`.
    pub fn n_tokens(&self) -> usize {
        self.image_w / self.downsample_f
    }

    pub fn latent_h(&self) -> usize {
        self.image_h / self.downsample_f
    }

    fn stages(&self) -> usize {
        self.downsample_f.trailing_zeros() as usize
    }
}

/// Diagonal Gaussian over a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Float> Posterior<T> {
    /// `mu + exp(0.5·log_var)·η`, η standard normal.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor<T> {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.log_var.data())
            .map(|(&m, &lv)| {
                let eta: f64 = StandardNormal.sample(rng);
                m + (T::lit(0.5) * lv).exp() * T::lit(eta)
            })
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data).expect("same shape")
    }

    /// Mean KL divergence to the standard normal, per element.
    pub fn kl(&self) -> f64 {
        let n = self.mu.numel() as f64;
        self.mu
            .data()
            .iter()
            .zip(self.log_var.data())
            .map(|(&m, &lv)| {
                let (m, lv) = (m.as_f64(), lv.as_f64());
                0.5 * (m * m + lv.exp() - 1.0 - lv)
            })
            .sum::<f64>()
            / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// `λ_rec·MSE(img, recon) + λ_reg·KL(posterior ‖ N(0, I))`.
pub fn tokenizer_loss<T: Float>(
    img: &Tensor<T>,
    recon: &Tensor<T>,
    posterior: &Posterior<T>,
    cfg: &TokenizerConfig,
) -> Result<TokenizerLoss> {
    let reconstruction = img.sub(recon)?.sum_sq().as_f64() / img.numel() as f64;
    if recon.shape() != img.shape() {
        return Err(contract(format!("recon {:?} vs image {:?}", recon.shape(), img.shape())));
    }
    let kl = posterior.kl();
    Ok(TokenizerLoss { total: cfg.lambda_rec * reconstruction + cfg.lambda_reg * kl, reconstruction, kl })
}

/// Tape version of the KL term: mean of `0.5(μ² + e^{lv} − 1 − lv)`.
pub(crate) fn kl_var<T: Float>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(log_var);
    let a = tape.add(mu2, ev)?;
    let a = tape.sub(a, log_var)?;
    let m = tape.mean(a);
    // mean(x − 1) = mean(x) − 1, constant offset folded in below
    let one = tape.leaf(Tensor::scalar(T::one()));
    let m = tape.sub(m, one)?;
    Ok(tape.scale(m, T::lit(0.5)))
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Conv autoencoder with a column-token bottleneck.
#[derive(Clone, Debug)]
pub struct ConvTokenizer<T> {
    cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    enc_in: Stage,
    enc_down: Vec<Stage>,
    enc_out: Conv2d,
    columnize: Linear,
    rasterize: Linear,
    dec_in: Stage,
    dec_up: Vec<Stage>,
    dec_out: Conv2d,
}

impl<T: Float> ConvTokenizer<T> {
    pub fn new(cfg: TokenizerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (base, lat, g) = (cfg.base_channels, cfg.latent_channels, cfg.groups);
        let stage = |s: &mut ParamStore<T>, name: &str, cin, stride, rng: &mut _| Stage {
            conv: Conv2d::new(s, &format!("{name}.conv"), cin, base, 3, stride, rng),
            norm: GroupNorm::new(s, &format!("{name}.norm"), base, g),
        };
        let enc_in = stage(&mut s, "enc.in", 3, 1, rng);
        let enc_down = (0..cfg.stages()).map(|i| stage(&mut s, &format!("enc.down{i}"), base, 2, rng)).collect();
        let enc_out = Conv2d::new(&mut s, "enc.out", base, lat, 3, 1, rng);
        let flat = cfg.latent_h() * lat;
        let columnize = Linear::with_std(&mut s, "columnize", flat, 2 * cfg.token_channels, true, (1.0 / flat as f64).sqrt(), rng);
        let rasterize =
            Linear::with_std(&mut s, "rasterize", cfg.token_channels, flat, true, (1.0 / cfg.token_channels as f64).sqrt(), rng);
        let dec_in = stage(&mut s, "dec.in", lat, 1, rng);
        let dec_up = (0..cfg.stages()).map(|i| stage(&mut s, &format!("dec.up{i}"), base, 1, rng)).collect();
        let dec_out = Conv2d::new(&mut s, "dec.out", base, 3, 3, 1, rng);
        Ok(Self { cfg, store: s, enc_in, enc_down, enc_out, columnize, rasterize, dec_in, dec_up, dec_out })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    fn stage_fwd(&self, tape: &mut Tape<T>, st: &Stage, x: Var) -> Result<Var> {
        let y = st.conv.forward(tape, &self.store, x)?;
        let y = st.norm.forward(tape, &self.store, y)?;
        Ok(tape.gelu(y))
    }

    /// `[B, H, W, 3]` images to `(mu, log_var)`, each `[B, W′, C′]`.
    pub fn encode_var(&self, tape: &mut Tape<T>, img: Var) -> Result<(Var, Var)> {
        let s = tape.shape(img);
        if s.len() != 4 || s[1..] != [self.cfg.image_h, self.cfg.image_w, 3] {
            return Err(contract(format!(
                "image batch {:?}, expected [B, {}, {}, 3]",
                s, self.cfg.image_h, self.cfg.image_w
            )));
        }
        let mut x = self.stage_fwd(tape, &self.enc_in, img)?;
        for st in &self.enc_down {
            x = self.stage_fwd(tape, st, x)?;
        }
        let x = self.enc_out.forward(tape, &self.store, x)?;
        let cols = column_flatten_var(tape, x)?;
        let stats = self.columnize.forward(tape, &self.store, cols)?;
        let c = self.cfg.token_channels;
        let mu = tape.slice(stats, 2, 0, c)?;
        let lv = tape.slice(stats, 2, c, 2 * c)?;
        let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((mu, lv))
    }

    /// `[B, W′, C′]` tokens to unclamped `[B, H, W, 3]` pixels.
    pub fn decode_var(&self, tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens);
        if s.len() != 3 || s[1..] != [self.cfg.n_tokens(), self.cfg.token_channels] {
            return Err(contract(format!(
                "tokens {:?}, expected [B, {}, {}]",
                s,
                self.cfg.n_tokens(),
                self.cfg.token_channels
            )));
        }
        let flat = self.rasterize.forward(tape, &self.store, tokens)?;
        let x = column_unflatten_var(tape, flat, self.cfg.latent_h())?;
        let mut x = self.stage_fwd(tape, &self.dec_in, x)?;
        for st in &self.dec_up {
            let up = tape.upsample2x(x)?;
            x = self.stage_fwd(tape, st, up)?;
        }
        self.dec_out.forward(tape, &self.store, x)
    }

    /// Posterior for one `[H, W, 3]` image or a `[B, H, W, 3]` batch.
    pub fn encode_image(&self, img: &Tensor<T>) -> Result<Posterior<T>> {
        let single = img.rank() == 3;
        let batch = if single { img.reshape([1, img.dim(0), img.dim(1), img.dim(2)])? } else { img.clone() };
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let (mu, lv) = self.encode_var(&mut tape, x)?;
        let (mut mu, mut lv) = (tape.value(mu).clone(), tape.value(lv).clone());
        if single {
            let s = [mu.dim(1), mu.dim(2)];
            mu = mu.into_reshape(s)?;
            lv = lv.into_reshape(s)?;
        }
        Ok(Posterior { mu, log_var: lv })
    }

    /// Decode `[W′, C′]` or `[B, W′, C′]` tokens to pixels clamped to `[-1, 1]`.
    pub fn decode_tokens(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let single = tokens.rank() == 2;
        let batch = if single { tokens.reshape([1, tokens.dim(0), tokens.dim(1)])? } else { tokens.clone() };
        let mut tape = Tape::new();
        let t = tape.leaf(batch);
        let raw = self.decode_var(&mut tape, t)?;
        let img = tape.value(raw).map(|x| x.max(-T::one()).min(T::one()));
        if single {
            let s = img.shape()[1..].to_vec();
            img.into_reshape(s)
        } else {
            Ok(img)
        }
    }

    /// Full training objective on a batch: reparameterised sample, decode,
    /// reconstruction + KL. Returns `(total, reconstruction, kl)` vars.
    pub fn loss_var(&self, tape: &mut Tape<T>, img: Var, noise: &Tensor<T>) -> Result<(Var, Var, Var)> {
        let (mu, lv) = self.encode_var(tape, img)?;
        let half = tape.scale(lv, T::lit(0.5));
        let std = tape.exp(half);
        let eta = tape.leaf(noise.clone());
        let jitter = tape.mul(std, eta)?;
        let z = tape.add(mu, jitter)?;
        let recon = self.decode_var(tape, z)?;
        let diff = tape.sub(recon, img)?;
        let sq = tape.mul(diff, diff)?;
        let rec = tape.mean(sq);
        let kl = kl_var(tape, mu, lv)?;
        let a = tape.scale(rec, T::lit(self.cfg.lambda_rec));
        let b = tape.scale(kl, T::lit(self.cfg.lambda_reg));
        let total = tape.add(a, b)?;
        Ok((total, rec, kl))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerTrainReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Posterior-sample reconstruction MSE on the training images at the end.
    pub recon_mse: f64,
    pub losses: Vec<f64>,
}

impl ConvTokenizer<f32> {
    /// Adam training on reconstruction + KL over `images` (`[N, H, W, 3]`).
    pub fn fit(&mut self, images: &Tensor<f32>, cfg: &TokenizerTrainConfig, rng: &mut impl Rng) -> Result<TokenizerTrainReport> {
        let n = images.dim(0);
        if n == 0 || cfg.batch_size == 0 {
            return Err(contract("tokenizer training needs images and a positive batch size"));
        }
        let mut opt = AdamW::new(&self.store, AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..AdamWConfig::default() });
        let mut losses = Vec::with_capacity(cfg.steps);
        let noise_shape = [cfg.batch_size, self.cfg.n_tokens(), self.cfg.token_channels];
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
            let batch = images.index_select(0, &idx)?;
            let noise = Tensor::from_fn(noise_shape, |_| std_normal_f32(rng));
            let mut tape = Tape::new();
            let x = tape.leaf(batch);
            let (total, _, _) = self.loss_var(&mut tape, x, &noise)?;
            let loss = tape.value(total).item() as f64;
            if !loss.is_finite() {
                log::warn!("tokenizer step {step}: non-finite loss, skipped");
                continue;
            }
            let grads = tape.backward(total)?.param_grads(&self.store);
            // short warmup keeps early conv updates stable
            let lr = cfg.lr * ((step + 1) as f64 / 20.0).min(1.0);
            opt.step(&mut self.store, &grads, lr)?;
            losses.push(loss);
        }
        let recon_mse = self.sample_recon_mse(images, rng)?;
        Ok(TokenizerTrainReport { steps: cfg.steps, final_loss: losses.last().copied().unwrap_or(f64::NAN), recon_mse, losses })
    }

    /// MSE of `decode(sample(encode(x)))` against `x`.
    pub fn sample_recon_mse(&self, images: &Tensor<f32>, rng: &mut impl Rng) -> Result<f64> {
        let post = self.encode_image(images)?;
        let z = post.sample(rng);
        let recon = self.decode_tokens(&z)?;
        Ok(recon.sub(images)?.sum_sq() as f64 / images.numel() as f64)
    }
}


fn std_normal_f32(rng: &mut impl Rng) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    z as f32
}
