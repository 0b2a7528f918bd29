use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use eqar_core::data_io::image::{encode_png, to_rgb8, GRAY};
use eqar_core::data_io::ModelBundle;
use eqar_core::sampler::{GenerationState, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Resolved settings of a session, echoed back on creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub class_id: usize,
    pub target_len: usize,
    pub seed: u64,
    pub cfg_start: f64,
    pub cfg_end: f64,
    pub n_steps: usize,
    pub temperature: f64,
}

impl SessionConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.n_steps,
            cfg_start: self.cfg_start,
            cfg_end: self.cfg_end,
            target_len: self.target_len,
            seed: self.seed,
            temperature: self.temperature,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Done,
}

/// One decoded band, kept so later requests never re-render it.
#[derive(Clone, Debug)]
struct Strip {
    rgb: Vec<u8>,
    png: Vec<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepResponse {
    pub position: usize,
    pub token_norm: f64,
    /// Base64 PNG of the band at `position`.
    pub image_strip: String,
    pub done: bool,
}

pub struct Session {
    pub id: String,
    pub config: SessionConfig,
    pub created: Instant,
    state: GenerationState,
    strips: Vec<Strip>,
}

impl Session {
    pub fn new(id: String, model: &ModelBundle, config: SessionConfig) -> Result<Self, ApiError> {
        let state = GenerationState::new(&model.generator, &[config.class_id], config.sampler())?;
        Ok(Self { id, config, created: Instant::now(), state, strips: Vec::new() })
    }

    pub fn accepted(&self) -> usize {
        self.strips.len()
    }

    pub fn status(&self) -> SessionStatus {
        if self.state.is_done() {
            SessionStatus::Done
        } else {
            SessionStatus::Active
        }
    }

    fn render_latest(&self, model: &ModelBundle) -> Result<Strip, ApiError> {
        let tokens = self.state.tokens()?;
        let (n, c) = (tokens.dim(1), tokens.dim(2));
        let prefix = tokens.into_reshape([n, c])?;
        let pixels = model.codec.decode_strip(&prefix, n - 1)?;
        let (h, w, rgb) = to_rgb8(&pixels)?;
        let png = encode_png(h, w, &rgb)?;
        Ok(Strip { rgb, png })
    }

    fn respond(&self) -> Result<StepResponse, ApiError> {
        let position = self.state.len() - 1;
        let token = self.state.token(position).ok_or_else(|| ApiError::internal("missing token"))?;
        let token_norm = token.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let strip = &self.strips[position];
        Ok(StepResponse { position, token_norm, image_strip: STANDARD.encode(&strip.png), done: self.state.is_done() })
    }

    /// Generate, accept and render the next token.
    pub fn step(&mut self, model: &ModelBundle) -> Result<StepResponse, ApiError> {
        if self.state.is_done() {
            return Err(ApiError::conflict(format!("session already has {} tokens", self.config.target_len)));
        }
        self.state.step(&model.generator)?;
        let strip = self.render_latest(model)?;
        self.strips.push(strip);
        self.respond()
    }

    /// Replace the latest token with a fresh draw at the same position.
    pub fn reject(&mut self, model: &ModelBundle) -> Result<StepResponse, ApiError> {
        if self.state.is_empty() {
            return Err(ApiError::conflict("nothing to reject yet"));
        }
        self.state.resample(&model.generator)?;
        let strip = self.render_latest(model)?;
        *self.strips.last_mut().expect("one strip per token") = strip;
        self.respond()
    }

    /// PNG of the full canvas, `image_h × (target_len · band_width)`, with
    /// bands not yet generated filled gray.
    pub fn image_png(&self, model: &ModelBundle) -> Result<Vec<u8>, ApiError> {
        let (h, _) = model.codec.image_hw();
        let bw = model.codec.band_width()?;
        let width = self.config.target_len * bw;
        let mut rgb = vec![GRAY; h * width * 3];
        for (p, strip) in self.strips.iter().enumerate() {
            for y in 0..h {
                let dst = (y * width + p * bw) * 3;
                rgb[dst..dst + bw * 3].copy_from_slice(&strip.rgb[y * bw * 3..(y + 1) * bw * 3]);
            }
        }
        Ok(encode_png(h, width, &rgb)?)
    }
}
