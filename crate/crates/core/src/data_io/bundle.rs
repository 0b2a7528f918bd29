//! A trained generator together with the codec and sampling defaults it
//! was trained with, stored as one checkpoint directory.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, load_into_store, save_checkpoint, Checkpoint, CheckpointManifest, Provenance};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::numerics::EmaState;
use crate::sampler::SamplerConfig;
use crate::tokenizer::{Codec, CodecConfig, ConvTokenizer, LinearTokenizer, TokenizerConfig};

pub const GENERATOR_KIND: &str = "generator";
pub const TOKENIZER_KIND: &str = "tokenizer";
/// Learned-codec weights are copied here inside a generator checkpoint.
pub const TOKENIZER_SUBDIR: &str = "tokenizer";

/// The `config` section of a generator manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBundleConfig {
    pub generator: GeneratorConfig,
    pub codec: CodecConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator<f32>,
    pub codec: Codec,
    pub config: GeneratorBundleConfig,
    pub manifest: CheckpointManifest,
}

impl ModelBundle {
    /// Sequence length the generator was trained on.
    pub fn train_len(&self) -> usize {
        self.generator.config().max_len
    }

    /// Stored class names, or `class <i>` when none were recorded.
    pub fn class_names(&self) -> Vec<String> {
        let n = self.generator.config().n_classes;
        if self.config.class_names.len() == n {
            self.config.class_names.clone()
        } else {
            (0..n).map(|i| format!("class {i}")).collect()
        }
    }
}

pub fn save_tokenizer(dir: &Path, tok: &ConvTokenizer<f32>, provenance: Provenance) -> Result<CheckpointManifest> {
    let mut ckpt = Checkpoint::from_store(TOKENIZER_KIND, tok.config(), &tok.store)?;
    ckpt.provenance = provenance;
    save_checkpoint(dir, &ckpt)
}

fn expect_kind(manifest: &CheckpointManifest, kind: &str, dir: &Path) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::Integrity(format!("{} holds a {:?} checkpoint, expected {kind:?}", dir.display(), manifest.kind)));
    }
    Ok(())
}

pub fn load_tokenizer(dir: &Path) -> Result<ConvTokenizer<f32>> {
    let (manifest, named) = load_checkpoint(dir, false)?;
    expect_kind(&manifest, TOKENIZER_KIND, dir)?;
    let cfg: TokenizerConfig = serde_json::from_value(manifest.config)?;
    let mut tok = ConvTokenizer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_into_store(&mut tok.store, named)?;
    Ok(tok)
}

/// Write the generator (and its EMA weights, if given) with everything
/// needed to sample from it.
pub fn save_generator_bundle(
    dir: &Path,
    model: &Generator<f32>,
    ema: Option<&EmaState<f32>>,
    codec: &Codec,
    sampler: &SamplerConfig,
    class_names: &[String],
    provenance: Provenance,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    if let Codec::Conv(tok) = codec {
        save_tokenizer(&dir.join(TOKENIZER_SUBDIR), tok, provenance.clone())?;
    }
    let config = GeneratorBundleConfig {
        generator: model.config().clone(),
        codec: codec.config(),
        sampler: sampler.clone(),
        class_names: class_names.to_vec(),
    };
    let mut ckpt = Checkpoint::from_store(GENERATOR_KIND, &config, &model.store)?;
    ckpt.ema = ema.map(|e| e.shadow.clone());
    ckpt.cfg_end = sampler.cfg_end;
    ckpt.provenance = provenance;
    ckpt.extra = extra;
    save_checkpoint(dir, &ckpt)
}

pub fn load_generator_bundle(dir: &Path, use_ema: bool) -> Result<ModelBundle> {
    let (manifest, named) = load_checkpoint(dir, use_ema)?;
    expect_kind(&manifest, GENERATOR_KIND, dir)?;
    let config: GeneratorBundleConfig = serde_json::from_value(manifest.config.clone())?;
    let mut generator = Generator::new(config.generator.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    load_into_store(&mut generator.store, named)?;
    let codec = match &config.codec {
        CodecConfig::Linear { config } => Codec::Linear(LinearTokenizer::new(config.clone())?),
        CodecConfig::Conv { config: cfg } => {
            let tok = load_tokenizer(&dir.join(TOKENIZER_SUBDIR))?;
            if tok.config() != cfg {
                return Err(Error::Integrity("stored tokenizer does not match the generator manifest".into()));
            }
            Codec::Conv(Box::new(tok))
        }
    };
    if codec.token_channels() != config.generator.token_channels {
        return Err(Error::Integrity("codec and generator disagree on token channels".into()));
    }
    Ok(ModelBundle { generator, codec, config, manifest })
}
