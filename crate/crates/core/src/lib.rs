//! Equivariant autoregressive image modeling at desk scale.
//!
//! Images are cut into vertical column bands, each band becomes one token,
//! and a windowed causal transformer with a flow-matching head predicts the
//! next band from the previous ones.

pub mod analysis;
pub mod data_io;
pub mod error;
pub mod generator;
pub mod numerics;
pub mod sampler;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
