//! One interface over the fixed linear tokenizer and the learned one.

use serde::{Deserialize, Serialize};

use super::autoencoder::{ConvTokenizer, TokenizerConfig};
use super::linear::{LinearTokenizer, LinearTokenizerConfig, TokenLayout, IMAGE_CHANNELS};
use crate::error::{contract, shape_err, Result};
use crate::numerics::Tensor;

/// Serializable description of a codec. The learned tokenizer's weights
/// live in a checkpoint; only its shape is recorded here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecConfig {
    Linear { config: LinearTokenizerConfig },
    Conv { config: TokenizerConfig },
}

#[derive(Clone, Debug)]
pub enum Codec {
    Linear(LinearTokenizer),
    Conv(Box<ConvTokenizer<f32>>),
}

impl Codec {
    pub fn config(&self) -> CodecConfig {
        match self {
            Self::Linear(t) => CodecConfig::Linear { config: t.config().clone() },
            Self::Conv(t) => CodecConfig::Conv { config: t.config().clone() },
        }
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            Self::Linear(t) => t.n_tokens(),
            Self::Conv(t) => t.config().n_tokens(),
        }
    }

    pub fn token_channels(&self) -> usize {
        match self {
            Self::Linear(t) => t.token_channels(),
            Self::Conv(t) => t.config().token_channels,
        }
    }

    pub fn image_hw(&self) -> (usize, usize) {
        match self {
            Self::Linear(t) => (t.config().image_h, t.config().image_w),
            Self::Conv(t) => (t.config().image_h, t.config().image_w),
        }
    }

    /// Whether token `i` is the `i`-th vertical band of the image.
    pub fn is_columnar(&self) -> bool {
        match self {
            Self::Linear(t) => t.config().layout == TokenLayout::Columns,
            Self::Conv(_) => true,
        }
    }

    /// Pixel width of one band.
    pub fn band_width(&self) -> Result<usize> {
        if !self.is_columnar() {
            return Err(contract("band strips need a column layout"));
        }
        let (_, w) = self.image_hw();
        Ok(w / self.n_tokens())
    }

    /// Tokens `[B, n, C′]` for images `[B, H, W, 3]`; the learned tokenizer
    /// returns its posterior mean.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Self::Linear(t) => t.encode(images),
            Self::Conv(t) => Ok(t.encode_image(images)?.mu),
        }
    }

    /// Images `[B, H, W, 3]` for tokens `[B, n, C′]`.
    pub fn decode(&self, tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Self::Linear(t) => t.decode(tokens),
            Self::Conv(t) => t.decode_tokens(tokens),
        }
    }

    /// Pixels `[H, band, 3]` of band `position` given the token prefix
    /// `[m, C′]` with `m > position`. Sequences may run past `n_tokens`: the
    /// linear codec decodes each band on its own, the learned one decodes the
    /// last `n_tokens`-token window ending at `position` (zero-padded on the
    /// right when the prefix is shorter) and crops the band.
    pub fn decode_strip(&self, prefix: &Tensor<f32>, position: usize) -> Result<Tensor<f32>> {
        let c = self.token_channels();
        if prefix.rank() != 2 || prefix.dim(1) != c || position >= prefix.dim(0) {
            return Err(shape_err("decode_strip", format!("prefix {:?}, position {position}", prefix.shape())));
        }
        let bw = self.band_width()?;
        match self {
            Self::Linear(t) => t.decode_patch(&prefix.data()[position * c..(position + 1) * c]),
            Self::Conv(t) => {
                let n = self.n_tokens();
                let start = (position + 1).saturating_sub(n);
                let end = (start + n).min(prefix.dim(0));
                let mut window = prefix.slice(0, start, end)?.into_data();
                window.resize(n * c, 0.0);
                let img = t.decode_tokens(&Tensor::new([n, c], window)?)?;
                let (h, w) = self.image_hw();
                let x0 = (position - start) * bw;
                let mut out = Vec::with_capacity(h * bw * IMAGE_CHANNELS);
                for y in 0..h {
                    let row = (y * w + x0) * IMAGE_CHANNELS;
                    out.extend_from_slice(&img.data()[row..row + bw * IMAGE_CHANNELS]);
                }
                Tensor::new([h, bw, IMAGE_CHANNELS], out)
            }
        }
    }
}

/// Horizontal concatenation of `[H, w_i, 3]` strips.
pub fn concat_strips(strips: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = strips.iter().collect();
    Tensor::concat(&refs, 1)
}
