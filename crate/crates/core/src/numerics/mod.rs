//! Dense tensors, tape-based reverse-mode differentiation, AdamW and EMA.

mod float;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use float::{DType, Float};
pub use optim::{adamw_step, global_norm, grad_clip_by_norm, AdamW, AdamWConfig, AdamWState, EmaState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::rotate_pairs;
