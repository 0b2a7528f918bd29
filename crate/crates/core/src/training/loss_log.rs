use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Per-position probe losses for one logged epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub per_position: Vec<f64>,
    /// Mean training loss over the epoch's optimized rows.
    pub train_loss: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub wall_secs: f64,
}

/// Per-epoch, per-position losses of a run, masked and held-out alike.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub masked: Vec<bool>,
    pub entries: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    epoch: usize,
    position: usize,
    loss: f64,
    masked: u8,
}

impl LossLog {
    pub fn new(masked: Vec<bool>) -> Self {
        Self { masked, entries: Vec::new() }
    }

    pub fn positions(&self) -> usize {
        self.masked.len()
    }

    pub fn push(&mut self, entry: EpochLoss) -> Result<()> {
        if entry.per_position.len() != self.positions() {
            return Err(contract(format!("{} position losses for a log over {}", entry.per_position.len(), self.positions())));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochLoss> {
        self.entries.last()
    }

    pub fn at_epoch(&self, epoch: usize) -> Option<&EpochLoss> {
        self.entries.iter().find(|e| e.epoch == epoch)
    }

    /// Same losses and step counts, ignoring wall-clock time.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.masked == other.masked
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.steps == b.steps
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.per_position.iter().zip(&b.per_position).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// `epoch,position,loss,masked` with one row per logged epoch and position.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            for (p, &loss) in e.per_position.iter().enumerate() {
                w.serialize(CsvRow { epoch: e.epoch, position: p, loss, masked: u8::from(self.masked[p]) })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuild losses from a CSV written by [`write_csv`](Self::write_csv).
    /// Training loss, steps and wall-clock are not in the CSV and come back as NaN / 0.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut log = Self::default();
        for row in r.deserialize() {
            let row: CsvRow = row?;
            if log.entries.last().is_none_or(|e| e.epoch != row.epoch) {
                log.entries.push(EpochLoss { epoch: row.epoch, per_position: Vec::new(), train_loss: f64::NAN, steps: 0, wall_secs: 0.0 });
            }
            let e = log.entries.last_mut().expect("pushed");
            if row.position != e.per_position.len() {
                return Err(Error::Integrity(format!("epoch {} positions out of order at {}", row.epoch, row.position)));
            }
            e.per_position.push(row.loss);
            if log.entries.len() == 1 {
                log.masked.push(row.masked != 0);
            }
        }
        if log.entries.iter().any(|e| e.per_position.len() != log.masked.len()) {
            return Err(Error::Integrity("epochs cover different position sets".into()));
        }
        Ok(log)
    }
}

/// `100·(baseline − current)/baseline` per position; `None` where the
/// baseline is not positive or either value is missing.
pub fn improvement_percent(current: &[f64], baseline: &[f64]) -> Result<Vec<Option<f64>>> {
    if current.len() != baseline.len() {
        return Err(contract(format!("{} positions against a baseline of {}", current.len(), baseline.len())));
    }
    Ok(current
        .iter()
        .zip(baseline)
        .map(|(&c, &b)| (b > 0.0 && c.is_finite() && b.is_finite()).then(|| 100.0 * (b - c) / b))
        .collect())
}

/// Relative improvement of the last epoch of `log` over the last epoch of
/// `baseline_log`.
pub fn relative_improvement(log: &LossLog, baseline_log: &LossLog) -> Result<Vec<Option<f64>>> {
    let (cur, base) = match (log.last(), baseline_log.last()) {
        (Some(c), Some(b)) => (c, b),
        _ => return Err(contract("relative improvement needs a logged epoch on both sides")),
    };
    improvement_percent(&cur.per_position, &base.per_position)
}
