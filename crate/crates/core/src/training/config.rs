use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Positions whose losses are optimized. Parsed from `"all"` or a comma
/// list of indices and inclusive ranges such as `"0-7"` or `"4,11"`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum TrainTaskMask {
    #[default]
    All,
    Subset(BTreeSet<usize>),
}

impl TrainTaskMask {
    pub fn subset(positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for p in positions {
            if !set.insert(p) {
                return Err(contract(format!("task mask lists position {p} twice")));
            }
        }
        if set.is_empty() {
            return Err(contract("task mask is empty"));
        }
        Ok(Self::Subset(set))
    }

    /// Per-position flags for sequences of length `w`.
    pub fn flags(&self, w: usize) -> Result<Vec<bool>> {
        match self {
            Self::All => Ok(vec![true; w]),
            Self::Subset(set) => {
                if let Some(&p) = set.iter().find(|&&p| p >= w) {
                    return Err(contract(format!("task mask position {p} outside [0, {w})")));
                }
                Ok((0..w).map(|i| set.contains(&i)).collect())
            }
        }
    }

    pub fn is_all(&self, w: usize) -> bool {
        match self {
            Self::All => true,
            Self::Subset(s) => s.len() == w && s.iter().all(|&p| p < w),
        }
    }
}

impl FromStr for TrainTaskMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        let bad = || contract(format!("cannot parse task mask {s:?}"));
        let mut positions = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                    if a > b {
                        return Err(bad());
                    }
                    positions.extend(a..=b);
                }
                None => positions.push(part.parse().map_err(|_| bad())?),
            }
        }
        Self::subset(positions)
    }
}

impl fmt::Display for TrainTaskMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let set = match self {
            Self::All => return write!(f, "all"),
            Self::Subset(set) => set,
        };
        // Collapse runs into ranges.
        let mut parts = Vec::new();
        let mut it = set.iter().copied().peekable();
        while let Some(a) = it.next() {
            let mut b = a;
            while it.peek() == Some(&(b + 1)) {
                b = it.next().expect("peeked");
            }
            parts.push(if a == b { a.to_string() } else { format!("{a}-{b}") });
        }
        write!(f, "{}", parts.join(","))
    }
}

impl Serialize for TrainTaskMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TrainTaskMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear ramp from 0 over the warmup, then constant.
    #[default]
    WarmupConstant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub task_mask: TrainTaskMask,
    /// Cross-attention position shifts are drawn from `0..=shift_max`;
    /// `None` means `7 · train_len`, enough for 8× extrapolation.
    pub shift_max: Option<usize>,
    /// Horizontal flip and (for shift-invariant corpora) cyclic shifts.
    pub augment: bool,
    /// Crop length minus one for `real_equivariant`; `None` uses the attention window.
    pub crop_k: Option<usize>,
    /// Held-out images used for the per-epoch position losses.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 3e-4,
            warmup_epochs: 3,
            lr_schedule: LrSchedule::WarmupConstant,
            weight_decay: 0.02,
            grad_clip: 3.0,
            ema_decay: 0.99,
            seed: 0,
            task_mask: TrainTaskMask::All,
            shift_max: None,
            augment: true,
            crop_k: None,
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(contract(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.batch_size == 0 || self.probe_size == 0 {
            return Err(contract("batch_size and probe_size must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.grad_clip > 0.0 && (0.0..1.0).contains(&self.ema_decay)) {
            return Err(contract("need base_lr ≥ 0, grad_clip > 0 and ema_decay in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate before update number `step` (0-based): a linear ramp from
/// 0 reaching `base_lr` at `warmup_steps`, then flat.
pub fn lr_at(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}
