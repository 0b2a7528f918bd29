//! Causal transformer over column tokens with a flow-matching head.

pub mod attention;
mod config;
pub mod flow;
mod model;

pub use attention::{rotary_apply, rotary_tables, sinusoidal, windowed_causal_attention, AttentionWindow};
pub use config::{FlowHeadConfig, GeneratorConfig, Variant};
pub use flow::{flow_matching_loss, flow_row_losses, FlowHead, FlowLoss, FlowSample};
pub use model::{Conditioning, Generator, KvWindowCache};
