use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::generator::{Generator, Variant};
use crate::training::{improvement_percent, LossLog, ProbeSet, TrainTaskMask};

/// Held-out versus trained losses of a model trained on a subset of positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub variant: Variant,
    pub per_position: Vec<f64>,
    pub trained: Vec<usize>,
    pub held_out: Vec<usize>,
    pub trained_mean: f64,
    pub held_out_mean: f64,
    /// `held_out_mean / trained_mean`; 1 when every position was trained.
    pub ratio: f64,
    /// Percent improvement per position over a reference profile, if given.
    pub improvement: Option<Vec<Option<f64>>>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Build the report from per-position losses already measured.
pub fn zero_shot_report(variant: Variant, per_position: Vec<f64>, mask: &TrainTaskMask, reference: Option<&[f64]>) -> Result<EquivarianceReport> {
    let w = per_position.len();
    let flags = mask.flags(w)?;
    if per_position.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(contract("position losses must be finite and positive"));
    }
    let trained: Vec<usize> = (0..w).filter(|&p| flags[p]).collect();
    let held_out: Vec<usize> = (0..w).filter(|&p| !flags[p]).collect();
    let trained_mean = mean(trained.iter().map(|&p| per_position[p]));
    let (held_out_mean, ratio) = if held_out.is_empty() {
        (trained_mean, 1.0)
    } else {
        let h = mean(held_out.iter().map(|&p| per_position[p]));
        (h, h / trained_mean)
    };
    let improvement = reference.map(|r| improvement_percent(&per_position, r)).transpose()?;
    Ok(EquivarianceReport { variant, per_position, trained, held_out, trained_mean, held_out_mean, ratio, improvement })
}

/// Score `model` on `probe` at every position with `(ε, t)` fixed by
/// `seed` and summarize against the training `mask`.
pub fn zero_shot_eval(
    model: &Generator<f32>,
    probe: &ProbeSet,
    mask: &TrainTaskMask,
    crop_len: Option<usize>,
    seed: u64,
) -> Result<EquivarianceReport> {
    let losses = probe.evaluate(model, crop_len, seed)?;
    zero_shot_report(model.config().variant, losses, mask, None)
}

impl EquivarianceReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["position", "loss", "trained", "improvement_percent"])?;
        for (p, l) in self.per_position.iter().enumerate() {
            let imp = self.improvement.as_ref().and_then(|v| v[p]).map(|x| x.to_string()).unwrap_or_default();
            out.write_record([p.to_string(), l.to_string(), u8::from(self.trained.contains(&p)).to_string(), imp])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-position percent improvement over `baseline`, averaged over every
/// logged epoch of `log`.
pub fn mean_improvement(log: &LossLog, baseline: &[f64]) -> Result<Vec<Option<f64>>> {
    if log.entries.is_empty() {
        return Err(contract("log has no epochs"));
    }
    let w = log.positions();
    let mut sums = vec![Some(0.0); w];
    for e in &log.entries {
        for (s, v) in sums.iter_mut().zip(improvement_percent(&e.per_position, baseline)?) {
            *s = s.zip(v).map(|(a, b)| a + b);
        }
    }
    let n = log.entries.len() as f64;
    Ok(sums.into_iter().map(|s| s.map(|v| v / n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    /// Positions the run optimized.
    pub trained: Vec<usize>,
    pub improvement: Vec<Option<f64>>,
}

/// Improvement of every position for each single-task run over an early
/// multi-task reference profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub positions: usize,
    pub baseline: Vec<f64>,
    pub rows: Vec<TransferRow>,
}

pub fn transfer_matrix(runs: &[LossLog], baseline: &[f64]) -> Result<TransferMatrix> {
    let w = baseline.len();
    let mut rows = Vec::with_capacity(runs.len());
    for log in runs {
        if log.positions() != w {
            return Err(contract(format!("run over {} positions, baseline over {w}", log.positions())));
        }
        let trained = (0..w).filter(|&p| log.masked[p]).collect();
        rows.push(TransferRow { trained, improvement: mean_improvement(log, baseline)? });
    }
    Ok(TransferMatrix { positions: w, baseline: baseline.to_vec(), rows })
}

impl TransferMatrix {
    /// `W × W` grid indexed by trained position, for single-position runs;
    /// `None` rows where no run trained that position alone.
    pub fn grid(&self) -> Vec<Option<Vec<Option<f64>>>> {
        let mut g = vec![None; self.positions];
        for r in &self.rows {
            if let [p] = r.trained[..] {
                g[p] = Some(r.improvement.clone());
            }
        }
        g
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["trained", "position", "improvement_percent"])?;
        for r in &self.rows {
            let trained = TrainTaskMask::subset(r.trained.iter().copied()).map(|m| m.to_string()).unwrap_or_default();
            for (p, v) in r.improvement.iter().enumerate() {
                out.write_record([trained.clone(), p.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean loss over `center` positions divided by the mean over `edges`.
pub fn center_edge_ratio(per_position: &[f64], center: &[usize], edges: &[usize]) -> Result<f64> {
    let pick = |ps: &[usize]| -> Result<f64> {
        if ps.is_empty() || ps.iter().any(|&p| p >= per_position.len()) {
            return Err(contract(format!("positions {ps:?} for a profile of {}", per_position.len())));
        }
        Ok(mean(ps.iter().map(|&p| per_position[p])))
    };
    let e = pick(edges)?;
    if e <= 0.0 {
        return Err(contract("edge loss must be positive"));
    }
    Ok(pick(center)? / e)
}
