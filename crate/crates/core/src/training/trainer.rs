use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::loss_log::{EpochLoss, LossLog};
use super::step::{evaluate_positions, real_equivariant_crop, train_step, TrainBatch};
use crate::data_io::synthetic::{augment, Corpus};
use crate::error::{contract, Result};
use crate::generator::{Generator, Variant};
use crate::numerics::{AdamW, AdamWConfig, EmaState, Tensor};
use crate::tokenizer::Codec;

/// A synthetic corpus seen through a codec.
#[derive(Clone, Debug)]
pub struct TokenCorpus {
    pub corpus: Corpus,
    pub codec: Codec,
}

impl TokenCorpus {
    pub fn new(corpus: Corpus, codec: Codec) -> Result<Self> {
        let s = corpus.spec();
        if codec.image_hw() != (s.image_h, s.image_w) {
            return Err(contract(format!(
                "codec expects {:?} images, corpus makes {}×{}",
                codec.image_hw(),
                s.image_h,
                s.image_w
            )));
        }
        Ok(Self { corpus, codec })
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.codec.n_tokens()
    }

    /// Tokens `[B, W, C′]` and labels; images are augmented when `rng` is given.
    pub fn tokens(&self, indices: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (mut images, labels) = self.corpus.batch(indices)?;
        if let Some(rng) = rng {
            let kind = self.corpus.spec().kind;
            let per = images.numel() / indices.len().max(1);
            let mut data = Vec::with_capacity(images.numel());
            for img in images.data().chunks(per) {
                let one = Tensor::new(images.shape()[1..].to_vec(), img.to_vec())?;
                data.extend_from_slice(augment(&one, kind, rng).data());
            }
            images = Tensor::new(images.shape().to_vec(), data)?;
        }
        Ok((self.codec.encode(&images)?, labels))
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: LossLog,
    pub ema: EmaState<f32>,
    pub steps: u64,
    pub skipped: u64,
}

const PROBE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const PROBE_CHUNK: usize = 64;

/// Held-out tokens used for the per-epoch position losses.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub tokens: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    pub fn from_corpus(data: &TokenCorpus, size: usize) -> Result<Self> {
        let n = size.min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        let (tokens, labels) = data.tokens(&idx, None)?;
        Ok(Self { tokens, labels })
    }

    /// Per-position mean loss with `(ε, t)` drawn from a stream fixed by `seed`,
    /// so successive calls compare like with like.
    pub fn evaluate(&self, model: &Generator<f32>, crop_len: Option<usize>, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_STREAM);
        let n = self.labels.len();
        let w = self.tokens.dim(1);
        let mut sum = vec![0.0; w];
        for start in (0..n).step_by(PROBE_CHUNK) {
            let end = (start + PROBE_CHUNK).min(n);
            let t = self.tokens.slice(0, start, end)?;
            let losses = evaluate_positions(model, &t, &self.labels[start..end], crop_len, &mut rng)?;
            for (s, l) in sum.iter_mut().zip(losses) {
                *s += l * (end - start) as f64;
            }
        }
        Ok(sum.into_iter().map(|s| s / n as f64).collect())
    }
}

/// Crop length used by crop-only training, if the variant uses it.
pub fn crop_len_for(model: &Generator<f32>, cfg: &TrainConfig) -> Option<usize> {
    (model.config().variant == Variant::RealEquivariant).then(|| cfg.crop_k.unwrap_or(model.config().window_w) + 1)
}

/// Train `model` on `data` for `cfg.epochs` epochs, logging probe losses
/// at every position after each epoch. `on_epoch` sees each entry as it lands.
pub fn train(
    model: &mut Generator<f32>,
    data: &TokenCorpus,
    probe: &ProbeSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let w = data.seq_len();
    let mcfg = model.config().clone();
    if data.codec.token_channels() != mcfg.token_channels {
        return Err(contract(format!("codec makes {} channels, model expects {}", data.codec.token_channels(), mcfg.token_channels)));
    }
    if mcfg.variant == Variant::Baseline2d && w > mcfg.max_len {
        return Err(contract(format!("baseline_2d has {} positions, sequences have {w}", mcfg.max_len)));
    }
    if data.is_empty() {
        return Err(contract("empty training corpus"));
    }
    let mask = cfg.task_mask.flags(w)?;
    let crop_len = crop_len_for(model, cfg);
    if let Some(len) = crop_len {
        if len > w {
            return Err(contract(format!("crop length {len} exceeds sequence length {w}")));
        }
    }
    let shift_max = cfg.shift_max.unwrap_or(7 * mcfg.max_len);
    let use_shifts = mcfg.variant == Variant::Equivariant && mcfg.query_pe();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, AdamWConfig { lr: cfg.base_lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut ema = EmaState::new(&model.store, cfg.ema_decay);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let mut log = LossLog::new(mask.clone());
    let (mut steps, mut skipped) = (0u64, 0u64);
    let started = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (tokens, labels) = data.tokens(chunk, cfg.augment.then_some(&mut rng))?;
            let b = chunk.len();
            let classes = labels.iter().map(|&c| (rng.random::<f64>() >= mcfg.cond_dropout).then_some(c)).collect();
            let shifts = (0..b).map(|_| if use_shifts { rng.random_range(0..=shift_max) } else { 0 }).collect();
            let mut batch = TrainBatch::new(tokens, classes, shifts)?;
            if let Some(len) = crop_len {
                batch.crops = Some(real_equivariant_crop(b, w, len - 1, &mut rng)?);
            }
            let lr = super::config::lr_at(steps, warmup, cfg.base_lr);
            let out = train_step(model, &mut opt, &batch, &mask, lr, cfg.grad_clip, &mut rng)?;
            if out.skipped {
                skipped += 1;
            } else {
                ema.update(model.store.tensors())?;
                loss_sum += out.loss;
                loss_n += 1;
            }
            steps += 1;
        }
        let per_position = probe.evaluate(model, crop_len, cfg.seed)?;
        let entry = EpochLoss {
            epoch,
            per_position,
            train_loss: if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 },
            steps,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train loss {:.4}, {:.1}s", entry.train_loss, entry.wall_secs);
        on_epoch(&entry);
        log.push(entry)?;
    }
    Ok(TrainOutcome { log, ema, steps, skipped })
}
