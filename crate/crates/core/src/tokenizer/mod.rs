//! Image ↔ column-token mappings.

pub mod autoencoder;
pub mod codec;
pub mod columns;
pub mod linear;

pub use autoencoder::{ConvTokenizer, Posterior, TokenizerConfig, TokenizerLoss, TokenizerTrainConfig, TokenizerTrainReport};
pub use codec::{concat_strips, Codec, CodecConfig};
pub use columns::{column_flatten, column_unflatten, columnize, rasterize, FeatureMap, LinearMap, TokenSequence};
pub use linear::{LinearMode, LinearTokenizer, LinearTokenizerConfig, TokenLayout};
