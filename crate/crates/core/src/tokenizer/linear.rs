//! Fixed linear tokenizer that maps raw pixel patches straight to tokens.
//!
//! It isolates generator experiments from autoencoder quality. With the
//! `Columns` layout every token is one vertical band of the image; the
//! `Raster2d` layout cuts square-ish patches read in raster order, which is
//! what the non-equivariant 2D baseline consumes.

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenLayout {
    Columns,
    Raster2d { rows: usize, cols: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearMode {
    /// Identity over the flattened patch (zero-padded up to `token_channels`).
    Exact { token_channels: usize },
    /// Mean over `cell_h × cell_w` pixel cells and all colour channels.
    Pooled { cell_h: usize, cell_w: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearTokenizerConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub n_tokens: usize,
    pub layout: TokenLayout,
    pub mode: LinearMode,
    /// Multiplier applied to token values.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTokenizer {
    cfg: LinearTokenizerConfig,
    patch_h: usize,
    patch_w: usize,
    token_channels: usize,
}

impl LinearTokenizer {
    pub fn new(cfg: LinearTokenizerConfig) -> Result<Self> {
        let (rows, cols) = match cfg.layout {
            TokenLayout::Columns => (1, cfg.n_tokens),
            TokenLayout::Raster2d { rows, cols } => {
                if rows * cols != cfg.n_tokens {
                    return Err(contract(format!("{rows}×{cols} grid does not give {} tokens", cfg.n_tokens)));
                }
                (rows, cols)
            }
        };
        if rows == 0 || cols == 0 || cfg.image_h % rows != 0 || cfg.image_w % cols != 0 {
            return Err(contract(format!(
                "{}×{} image does not split into a {}×{} token grid",
                cfg.image_h, cfg.image_w, rows, cols
            )));
        }
        let (patch_h, patch_w) = (cfg.image_h / rows, cfg.image_w / cols);
        let patch_dim = patch_h * patch_w * IMAGE_CHANNELS;
        let token_channels = match cfg.mode {
            LinearMode::Exact { token_channels } => {
                if token_channels < patch_dim {
                    return Err(contract(format!(
                        "exact mode needs at least {patch_dim} token channels, got {token_channels}"
                    )));
                }
                token_channels
            }
            LinearMode::Pooled { cell_h, cell_w } => {
                if cell_h == 0 || cell_w == 0 || patch_h % cell_h != 0 || patch_w % cell_w != 0 {
                    return Err(contract(format!("{cell_h}×{cell_w} cells do not tile a {patch_h}×{patch_w} patch")));
                }
                (patch_h / cell_h) * (patch_w / cell_w)
            }
        };
        if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
            return Err(contract("token scale must be positive"));
        }
        Ok(Self { cfg, patch_h, patch_w, token_channels })
    }

    pub fn config(&self) -> &LinearTokenizerConfig {
        &self.cfg
    }

    pub fn n_tokens(&self) -> usize {
        self.cfg.n_tokens
    }

    pub fn token_channels(&self) -> usize {
        self.token_channels
    }

    /// Pixel extent `(height, width)` covered by one token.
    pub fn patch_size(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    fn grid_cols(&self) -> usize {
        self.cfg.image_w / self.patch_w
    }

    fn patch_origin(&self, j: usize) -> (usize, usize) {
        let gc = self.grid_cols();
        ((j / gc) * self.patch_h, (j % gc) * self.patch_w)
    }

    /// `[H, W, 3]` image (or `[B, H, W, 3]` batch) to `[n, C′]` (or `[B, n, C′]`).
    pub fn encode<T: Float>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, lead) = self.check_image(img.shape())?;
        let per = self.cfg.image_h * self.cfg.image_w * IMAGE_CHANNELS;
        let mut out = Vec::with_capacity(batch * self.cfg.n_tokens * self.token_channels);
        for b in 0..batch {
            let px = &img.data()[b * per..(b + 1) * per];
            for j in 0..self.cfg.n_tokens {
                self.encode_patch(px, j, &mut out);
            }
        }
        let mut shape = lead;
        shape.extend([self.cfg.n_tokens, self.token_channels]);
        Tensor::new(shape, out)
    }

    fn encode_patch<T: Float>(&self, px: &[T], j: usize, out: &mut Vec<T>) {
        let (y0, x0) = self.patch_origin(j);
        let w = self.cfg.image_w;
        let scale = T::lit(self.cfg.scale);
        match self.cfg.mode {
            LinearMode::Exact { token_channels } => {
                let start = out.len();
                for y in 0..self.patch_h {
                    let s = ((y0 + y) * w + x0) * IMAGE_CHANNELS;
                    out.extend(px[s..s + self.patch_w * IMAGE_CHANNELS].iter().map(|&v| v * scale));
                }
                out.resize(start + token_channels, T::zero());
            }
            LinearMode::Pooled { cell_h, cell_w } => {
                let norm = T::lit(self.cfg.scale / (cell_h * cell_w * IMAGE_CHANNELS) as f64);
                for cy in 0..self.patch_h / cell_h {
                    for cx in 0..self.patch_w / cell_w {
                        let mut acc = T::zero();
                        for y in 0..cell_h {
                            let s = ((y0 + cy * cell_h + y) * w + x0 + cx * cell_w) * IMAGE_CHANNELS;
                            acc += px[s..s + cell_w * IMAGE_CHANNELS].iter().copied().sum::<T>();
                        }
                        out.push(acc * norm);
                    }
                }
            }
        }
    }

    /// Pixels of a single token: `[patch_h, patch_w, 3]`.
    pub fn decode_patch<T: Float>(&self, token: &[T]) -> Result<Tensor<T>> {
        if token.len() != self.token_channels {
            return Err(shape_err("decode_patch", format!("token of {} channels, expected {}", token.len(), self.token_channels)));
        }
        let inv = T::lit(1.0 / self.cfg.scale);
        let (ph, pw) = (self.patch_h, self.patch_w);
        let data = match self.cfg.mode {
            LinearMode::Exact { .. } => token[..ph * pw * IMAGE_CHANNELS].iter().map(|&v| v * inv).collect(),
            LinearMode::Pooled { cell_h, cell_w } => {
                let ncx = pw / cell_w;
                (0..ph * pw * IMAGE_CHANNELS)
                    .map(|i| {
                        let (y, x) = (i / (pw * IMAGE_CHANNELS), (i / IMAGE_CHANNELS) % pw);
                        token[(y / cell_h) * ncx + x / cell_w] * inv
                    })
                    .collect()
            }
        };
        Tensor::new([ph, pw, IMAGE_CHANNELS], data)
    }

    /// Inverse of [`encode`](Self::encode) (least-squares inverse in pooled mode).
    pub fn decode<T: Float>(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let r = tokens.rank();
        if r < 2 || tokens.dim(r - 2) != self.cfg.n_tokens || tokens.dim(r - 1) != self.token_channels {
            return Err(shape_err(
                "decode",
                format!("tokens {:?}, expected [.., {}, {}]", tokens.shape(), self.cfg.n_tokens, self.token_channels),
            ));
        }
        let lead = tokens.shape()[..r - 2].to_vec();
        let batch: usize = lead.iter().product();
        let (h, w) = (self.cfg.image_h, self.cfg.image_w);
        let per = h * w * IMAGE_CHANNELS;
        let mut out = vec![T::zero(); batch * per];
        let c = self.token_channels;
        for b in 0..batch {
            for j in 0..self.cfg.n_tokens {
                let off = (b * self.cfg.n_tokens + j) * c;
                let patch = self.decode_patch(&tokens.data()[off..off + c])?;
                let (y0, x0) = self.patch_origin(j);
                let row = self.patch_w * IMAGE_CHANNELS;
                for y in 0..self.patch_h {
                    let d = b * per + ((y0 + y) * w + x0) * IMAGE_CHANNELS;
                    out[d..d + row].copy_from_slice(&patch.data()[y * row..(y + 1) * row]);
                }
            }
        }
        let mut shape = lead;
        shape.extend([h, w, IMAGE_CHANNELS]);
        Tensor::new(shape, out)
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, Vec<usize>)> {
        let expect = [self.cfg.image_h, self.cfg.image_w, IMAGE_CHANNELS];
        let r = shape.len();
        if r < 3 || shape[r - 3..] != expect {
            return Err(contract(format!("image shape {:?}, expected [.., {}, {}, 3]", shape, expect[0], expect[1])));
        }
        let lead = shape[..r - 3].to_vec();
        Ok((lead.iter().product(), lead))
    }
}
