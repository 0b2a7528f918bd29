use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::generator::Variant;

/// Query–key pairs scored by one attention layer over `n` tokens.
///
/// Full causal attention scores `n(n+1)/2` pairs and the windowed variant
/// (self plus `w` predecessors) `Σᵢ min(i, w+1)`. For crop-only models the
/// count is per crop of `w + 1` tokens, `(w+1)(w+2)/2`; [`flop_report`]
/// normalizes it per generated token.
pub fn attention_pair_count(n: usize, w: usize, variant: Variant) -> Result<u64> {
    if n == 0 {
        return Err(contract("attention over zero tokens"));
    }
    let (n, w) = (n as u64, w as u64);
    Ok(match variant {
        Variant::Baseline2d => n * (n + 1) / 2,
        Variant::Equivariant => (1..=n).map(|i| i.min(w + 1)).sum(),
        Variant::RealEquivariant => (w + 1) * (w + 2) / 2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantCost {
    pub variant: Variant,
    /// Exact pair count from [`attention_pair_count`].
    pub pairs: u64,
    /// Pairs attributed to a length-`n` sequence (crops are scaled per token).
    pub pairs_per_sequence: f64,
    pub flops: f64,
    pub ratio_vs_full: f64,
}

/// Attention cost of the three variants at one shape. FLOPs count `4·d`
/// per query–key pair (the `QKᵀ` dot and the `AV` accumulation, a multiply
/// and an add each) with `d = heads × head_dim`, summed over layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n: usize,
    pub w: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub convention: String,
    pub variants: Vec<VariantCost>,
}

pub fn flop_report(n: usize, w: usize, n_layers: usize, n_heads: usize, head_dim: usize) -> Result<FlopReport> {
    let per_pair = 4.0 * (n_heads * head_dim) as f64 * n_layers as f64;
    let full = attention_pair_count(n, w, Variant::Baseline2d)? as f64;
    let mut variants = Vec::new();
    for variant in [Variant::Baseline2d, Variant::Equivariant, Variant::RealEquivariant] {
        let pairs = attention_pair_count(n, w, variant)?;
        let per_seq = match variant {
            // each token is produced by one crop of w + 1 tokens
            Variant::RealEquivariant => pairs as f64 * n as f64 / (w + 1) as f64,
            _ => pairs as f64,
        };
        variants.push(VariantCost { variant, pairs, pairs_per_sequence: per_seq, flops: per_seq * per_pair, ratio_vs_full: per_seq / full });
    }
    Ok(FlopReport {
        n,
        w,
        n_layers,
        n_heads,
        head_dim,
        convention: "4·d FLOPs per query-key pair, d = heads × head_dim, summed over layers".into(),
        variants,
    })
}

impl FlopReport {
    pub fn cost(&self, variant: Variant) -> Option<&VariantCost> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["variant", "pairs", "pairs_per_sequence", "flops", "ratio_vs_full"])?;
        for v in &self.variants {
            let name = serde_json::to_value(v.variant)?.as_str().unwrap_or_default().to_string();
            out.write_record([name, v.pairs.to_string(), v.pairs_per_sequence.to_string(), v.flops.to_string(), v.ratio_vs_full.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
