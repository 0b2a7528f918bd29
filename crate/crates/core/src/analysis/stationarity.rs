use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Tensor;

/// Smallest batch accepted by [`column_stationarity`].
pub const MIN_STATIONARITY_BATCH: usize = 32;

/// Per-position z-scores of the token channel-mean and channel-std against
/// a reference band of positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub batch: usize,
    /// Reference positions `[start, end)`.
    pub band: (usize, usize),
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
}

impl StationarityReport {
    /// Largest `|z|` over both statistics at positions `from..`.
    pub fn max_abs_z_from(&self, from: usize) -> f64 {
        self.z_mean.iter().chain(&self.z_std).enumerate()
            .filter(|(i, _)| i % self.z_mean.len() >= from)
            .map(|(_, z)| z.abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["position", "z_mean", "z_std", "in_band"])?;
        for p in 0..self.z_mean.len() {
            let band = u8::from((self.band.0..self.band.1).contains(&p));
            out.write_record([p.to_string(), self.z_mean[p].to_string(), self.z_std[p].to_string(), band.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// z-scores per position for `samples` `[B, N, C′]`.
///
/// Each token is summarized by the mean and the standard deviation of its
/// channels. For each summary, position `p` gets
/// `z = (mean over the batch at p − band mean) / (band sd / √B)`, where the
/// band pools every sample at positions `[w+1, train_len)`. Positions inside
/// the band are scored against the band without themselves.
pub fn column_stationarity(samples: &Tensor<f32>, train_len: usize, w: usize) -> Result<StationarityReport> {
    if samples.rank() != 3 {
        return Err(contract(format!("samples must be [B, N, C′], got {:?}", samples.shape())));
    }
    let (b, n, c) = (samples.dim(0), samples.dim(1), samples.dim(2));
    if b < MIN_STATIONARITY_BATCH {
        return Err(contract(format!("stationarity needs a batch of at least {MIN_STATIONARITY_BATCH}, got {b}")));
    }
    let band = (w + 1, train_len.min(n));
    if band.1 < band.0 + 2 || c < 2 {
        return Err(contract(format!("reference band {band:?} needs two positions and tokens two channels")));
    }
    // summaries[k][p * b + s] for k = channel-mean, channel-std
    let mut summaries = [vec![0.0; n * b], vec![0.0; n * b]];
    for s in 0..b {
        for p in 0..n {
            let tok: Vec<f64> = samples.data()[(s * n + p) * c..(s * n + p + 1) * c].iter().map(|&v| v as f64).collect();
            let (m, sd) = mean_sd(&tok);
            summaries[0][p * b + s] = m;
            summaries[1][p * b + s] = sd;
        }
    }
    let score = |vals: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|p| {
                let reference: Vec<f64> = (band.0..band.1).filter(|&q| q != p).flat_map(|q| vals[q * b..(q + 1) * b].iter().copied()).collect();
                let (mu, sd) = mean_sd(&reference);
                let (m, _) = mean_sd(&vals[p * b..(p + 1) * b]);
                if sd == 0.0 {
                    if m == mu { 0.0 } else { f64::INFINITY }
                } else {
                    (m - mu) / (sd / (b as f64).sqrt())
                }
            })
            .collect()
    };
    Ok(StationarityReport { batch: b, band, z_mean: score(&summaries[0]), z_std: score(&summaries[1]) })
}
