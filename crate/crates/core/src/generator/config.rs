use serde::{Deserialize, Serialize};

use super::attention::AttentionWindow;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Windowed causal attention with rotary positions.
    Equivariant,
    /// Full causal attention with learned absolute positions, no rotary.
    Baseline2d,
    /// Windowed attention trained on length-`w+1` crops without absolute positions.
    RealEquivariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowHeadConfig {
    /// Hidden layers of the head MLP.
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub t_embed_dim: usize,
}

impl Default for FlowHeadConfig {
    fn default() -> Self {
        Self { mlp_layers: 3, mlp_hidden: 128, t_embed_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Predecessors each query sees besides itself. Ignored by `baseline_2d`.
    pub window_w: usize,
    pub rotary_base: f64,
    pub cond_seq_len: usize,
    pub n_classes: usize,
    pub mlp_ratio: usize,
    pub token_channels: usize,
    /// Training sequence length; also the size of the baseline's position table.
    pub max_len: usize,
    /// Add a sinusoidal position code (at position + shift) to cross-attention queries.
    pub cross_attn_pe: bool,
    pub cond_dropout: f64,
    pub head: FlowHeadConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Equivariant,
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            window_w: 3,
            rotary_base: 10000.0,
            cond_seq_len: 16,
            n_classes: 10,
            mlp_ratio: 4,
            token_channels: 16,
            max_len: 16,
            cross_attn_pe: true,
            cond_dropout: 0.1,
            head: FlowHeadConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_layers > 0
            && self.n_heads > 0
            && self.hidden_dim % self.n_heads == 0
            && (self.hidden_dim / self.n_heads) % 2 == 0
            && self.hidden_dim % 2 == 0
            && self.cond_seq_len > 0
            && self.n_classes > 0
            && self.mlp_ratio > 0
            && self.token_channels > 0
            && self.max_len > 0
            && self.head.mlp_hidden > 0
            && self.head.t_embed_dim % 2 == 0
            && self.head.t_embed_dim > 0;
        if !ok {
            return Err(contract(format!(
                "invalid generator shape: hidden {} / heads {} must give an even head dim, all sizes positive",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(contract(format!("cond_dropout {} outside [0, 1)", self.cond_dropout)));
        }
        if !(self.rotary_base.is_finite() && self.rotary_base > 1.0) {
            return Err(contract("rotary_base must exceed 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn attention_window(&self) -> AttentionWindow {
        match self.variant {
            Variant::Baseline2d => AttentionWindow::Full,
            _ => AttentionWindow::Window(self.window_w),
        }
    }

    pub fn uses_rotary(&self) -> bool {
        self.variant != Variant::Baseline2d
    }

    /// Whether cross-attention queries receive a position code.
    pub fn query_pe(&self) -> bool {
        self.cross_attn_pe && self.variant != Variant::RealEquivariant
    }

    /// Whether the model can run past `max_len` positions.
    pub fn extrapolates(&self) -> bool {
        self.variant != Variant::Baseline2d
    }
}
