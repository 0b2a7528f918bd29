//! Equivariance measurements: zero-shot and single-task transfer, attention
//! cost accounting, loss profiles, long-generation stationarity, and a
//! feature-space distribution distance.

mod dist;
mod flops;
mod stationarity;
mod transfer;

pub use dist::{frechet_distance, DistStats, DIST_FEATURES, DIST_LABEL};
pub use flops::{attention_pair_count, flop_report, FlopReport, VariantCost};
pub use stationarity::{column_stationarity, StationarityReport, MIN_STATIONARITY_BATCH};
pub use transfer::{
    center_edge_ratio, mean_improvement, transfer_matrix, zero_shot_eval, zero_shot_report, EquivarianceReport,
    TransferMatrix, TransferRow,
};

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
