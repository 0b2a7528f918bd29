use rand::Rng;

use crate::error::{contract, shape_err, Result};
use crate::generator::{flow_row_losses, Conditioning, Generator};
use crate::numerics::{grad_clip_by_norm, global_norm, AdamW, Tape, Tensor, Var};

/// One minibatch of token sequences with their conditioning.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[B, W, C′]`
    pub tokens: Tensor<f32>,
    pub classes: Vec<Option<usize>>,
    pub shifts: Vec<usize>,
    /// Per-sample crop offsets and the crop length, for crop-only training.
    pub crops: Option<(Vec<usize>, usize)>,
}

impl TrainBatch {
    pub fn new(tokens: Tensor<f32>, classes: Vec<Option<usize>>, shifts: Vec<usize>) -> Result<Self> {
        if tokens.rank() != 3 || classes.len() != tokens.dim(0) || shifts.len() != tokens.dim(0) {
            return Err(shape_err(
                "train_batch",
                format!("tokens {:?}, {} classes, {} shifts", tokens.shape(), classes.len(), shifts.len()),
            ));
        }
        Ok(Self { tokens, classes, shifts, crops: None })
    }
}

/// Uniform crop offsets in `[0, W − k − 1]`, one per sample, for crops of
/// length `k + 1` over the teacher-forcing pairs of a length-`W` sequence.
pub fn real_equivariant_crop(batch: usize, seq_len: usize, k: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, usize)> {
    if k + 1 > seq_len {
        return Err(contract(format!("crop of {} tokens from a sequence of {seq_len}", k + 1)));
    }
    let span = seq_len - k;
    Ok(((0..batch).map(|_| rng.random_range(0..span)).collect(), k + 1))
}

/// Backbone conditions and clean targets, flattened to rows.
struct Rows {
    z: Var,
    x: Tensor<f32>,
    positions: Vec<usize>,
}

/// Teacher-forcing rows for a batch: the full sequence, or for crops the
/// pairs `(input_j, x_j)` for `j ∈ [o, o + len)` run at crop-local positions.
/// The first input of a sequence is the begin-of-sequence vector.
fn batch_rows(model: &Generator<f32>, tape: &mut Tape<f32>, batch: &TrainBatch) -> Result<Rows> {
    let (b, w, c) = (batch.tokens.dim(0), batch.tokens.dim(1), batch.tokens.dim(2));
    let d = model.config().hidden_dim;
    let cond = Conditioning::new(&batch.classes, &batch.shifts);
    match &batch.crops {
        None => {
            let z = model.forward_targets(tape, &batch.tokens, &cond)?;
            let z = tape.reshape(z, [b * w, d])?;
            let positions = (0..b * w).map(|i| i % w).collect();
            Ok(Rows { z, x: batch.tokens.reshape([b * w, c])?, positions })
        }
        Some((offsets, len)) => {
            let len = *len;
            if offsets.len() != b || offsets.iter().any(|&o| o + len > w) {
                return Err(contract(format!("crop offsets {offsets:?} of length {len} for [{b}, {w}]")));
            }
            let mut embedded = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b * len * c);
            let mut positions = Vec::with_capacity(b * len);
            for (i, &o) in offsets.iter().enumerate() {
                let seq = batch.tokens.slice(0, i, i + 1)?;
                let (inputs, bos) = if o == 0 { (seq.slice(1, 0, len - 1)?, true) } else { (seq.slice(1, o - 1, o + len - 1)?, false) };
                embedded.push(model.embed(tape, &inputs, bos, 0)?);
                targets.extend_from_slice(seq.slice(1, o, o + len)?.data());
                positions.extend(o..o + len);
            }
            let h = tape.concat(&embedded, 0)?;
            let z = model.backbone(tape, h, 0, &cond)?;
            let z = tape.reshape(z, [b * len, d])?;
            Ok(Rows { z, x: Tensor::new([b * len, c], targets)?, positions })
        }
    }
}

fn position_means(values: &[f64], positions: &[usize], w: usize) -> Vec<f64> {
    let mut sum = vec![0.0; w];
    let mut count = vec![0usize; w];
    for (&v, &p) in values.iter().zip(positions) {
        sum[p] += v;
        count[p] += 1;
    }
    sum.iter().zip(&count).map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect()
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over the optimized rows.
    pub loss: f64,
    /// Batch-mean loss at every position (NaN where no row landed).
    pub per_position: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Forward, backward on the masked rows only, clip, and one AdamW update.
/// A non-finite loss or gradient skips the update.
pub fn train_step(
    model: &mut Generator<f32>,
    opt: &mut AdamW<f32>,
    batch: &TrainBatch,
    mask: &[bool],
    lr: f64,
    grad_clip: f64,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let w = batch.tokens.dim(1);
    if mask.len() != w {
        return Err(contract(format!("mask of {} for sequences of {w}", mask.len())));
    }
    let mut tape = Tape::new();
    let rows = batch_rows(model, &mut tape, batch)?;
    let losses = flow_row_losses(&mut tape, &model.head, &model.store, &rows.x, rows.z, rng)?;
    let values = tape.value(losses).to_f64_vec();
    let per_position = position_means(&values, &rows.positions, w);
    let keep: Vec<usize> = (0..values.len()).filter(|&i| mask[rows.positions[i]]).collect();
    if keep.is_empty() {
        return Ok(StepOutcome { loss: f64::NAN, per_position, grad_norm: 0.0, skipped: true });
    }
    let sel = if keep.len() == values.len() { losses } else { tape.index_select(losses, 0, &keep)? };
    let loss_var = tape.mean(sel);
    let loss = tape.value(loss_var).item() as f64;
    if !loss.is_finite() {
        log::warn!("non-finite training loss, step skipped");
        return Ok(StepOutcome { loss, per_position, grad_norm: f64::NAN, skipped: true });
    }
    let mut grads = tape.backward(loss_var)?.param_grads(&model.store);
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        log::warn!("non-finite gradient norm, step skipped");
        return Ok(StepOutcome { loss, per_position, grad_norm, skipped: true });
    }
    grad_clip_by_norm(&mut grads, grad_clip);
    opt.step(&mut model.store, &grads, lr)?;
    Ok(StepOutcome { loss, per_position, grad_norm, skipped: false })
}

/// Per-position mean loss on `tokens` without gradient. Every position sees
/// the same kind of draw: one `(ε, t)` per row from `rng`.
///
/// With `crop_len` set (crop-trained models), position `p` is scored inside
/// the crop that ends at `p`, or the first crop for `p < crop_len`.
pub fn evaluate_positions(
    model: &Generator<f32>,
    tokens: &Tensor<f32>,
    classes: &[usize],
    crop_len: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (b, w) = (tokens.dim(0), tokens.dim(1));
    let classes: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
    let shifts = vec![0; b];
    let score = |batch: &TrainBatch, mut rng: &mut dyn rand::RngCore| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut tape = Tape::new();
        let rows = batch_rows(model, &mut tape, batch)?;
        let losses = flow_row_losses(&mut tape, &model.head, &model.store, &rows.x, rows.z, &mut rng)?;
        Ok((tape.value(losses).to_f64_vec(), rows.positions))
    };
    let mut batch = TrainBatch::new(tokens.clone(), classes, shifts)?;
    match crop_len {
        None => {
            let (v, p) = score(&batch, rng)?;
            Ok(position_means(&v, &p, w))
        }
        Some(len) => {
            if len == 0 || len > w {
                return Err(contract(format!("crop length {len} for sequences of {w}")));
            }
            let (mut vals, mut pos) = (Vec::new(), Vec::new());
            for o in 0..=w - len {
                batch.crops = Some((vec![o; b], len));
                let (v, p) = score(&batch, rng)?;
                let first = if o == 0 { 0 } else { len - 1 };
                for (i, (&vv, &pp)) in v.iter().zip(&p).enumerate() {
                    if i % len >= first {
                        vals.push(vv);
                        pos.push(pp);
                    }
                }
            }
            Ok(position_means(&vals, &pos, w))
        }
    }
}
