//! The run configuration document and its override syntax.

use std::path::{Path, PathBuf};

use eqar_core::data_io::SyntheticSpec;
use eqar_core::generator::GeneratorConfig;
use eqar_core::sampler::SamplerConfig;
use eqar_core::tokenizer::{CodecConfig, LinearMode, LinearTokenizerConfig, TokenLayout, TokenizerTrainConfig};
use eqar_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub codec: CodecConfig,
    /// Weights for a learned codec, as written by `tok-train`.
    pub checkpoint: Option<PathBuf>,
    pub train: TokenizerTrainConfig,
}

/// Column bands of 64×64 images, each pooled over 4×4 cells.
pub fn default_codec() -> CodecConfig {
    CodecConfig::Linear {
        config: LinearTokenizerConfig {
            image_h: 64,
            image_w: 64,
            n_tokens: 16,
            layout: TokenLayout::Columns,
            mode: LinearMode::Pooled { cell_h: 4, cell_w: 4 },
            scale: 2.0,
        },
    }
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { codec: default_codec(), checkpoint: None, train: TokenizerTrainConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    /// Sequence length; defaults to the generator's `max_len`.
    pub n: Option<usize>,
    /// Window; defaults to the generator's `window_w`.
    pub w: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// `loss_log.json` files of single-task runs.
    pub runs: Vec<PathBuf>,
    /// Log of the multi-task reference run.
    pub baseline_log: Option<PathBuf>,
    /// Epoch of the reference run used as the baseline profile.
    pub baseline_epoch: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { runs: Vec::new(), baseline_log: None, baseline_epoch: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaritySection {
    pub batch: usize,
    /// Generated length; defaults to eight training lengths.
    pub target_len: Option<usize>,
}

impl Default for StationaritySection {
    fn default() -> Self {
        Self { batch: 64, target_len: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistSection {
    pub n_samples: usize,
}

impl Default for DistSection {
    fn default() -> Self {
        Self { n_samples: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub checkpoint: Option<PathBuf>,
    pub use_ema: bool,
    /// Seeds the `(ε, t)` draws of evaluation losses.
    pub eval_seed: u64,
    /// Corpus split used for held-out evaluation.
    pub eval_split: u64,
    pub flops: FlopsSection,
    pub transfer: TransferSection,
    pub stationarity: StationaritySection,
    pub dist: DistSection,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            use_ema: false,
            eval_seed: 0,
            eval_split: 1,
            flops: FlopsSection::default(),
            transfer: TransferSection::default(),
            stationarity: StationaritySection::default(),
            dist: DistSection::default(),
        }
    }
}

/// Every field is optional; omitted ones take the defaults above.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: SyntheticSpec,
    pub analysis: AnalysisSection,
}

/// Parse a `key.path=value` override. The value is read as JSON when it
/// parses, otherwise taken as a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (path, raw) = s.split_once('=').ok_or_else(|| CliError::usage(format!("override {s:?} is not key=value")))?;
    let keys: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(CliError::usage(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

/// Set `doc[k0][k1]… = value`, creating objects along the way.
pub fn apply_override(doc: &mut Value, keys: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                let pointer = format!("/{}", keys[..i].join("/"));
                return Err(CliError::Config { pointer, message: "cannot override inside a non-object value".into() });
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert(k.clone(), value);
            return Ok(());
        }
        cur = map.entry(k.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Deserialize with strict schema checks, reporting the failing JSON pointer.
pub fn from_value(doc: Value) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize::<_, RunConfig>(doc).map_err(|e| {
        let pointer = e.path().iter().map(|seg| format!("/{}", segment(seg))).collect::<String>();
        CliError::Config { pointer, message: e.inner().to_string() }
    })
}

fn segment(seg: &serde_path_to_error::Segment) -> String {
    use serde_path_to_error::Segment;
    match seg {
        Segment::Seq { index } => index.to_string(),
        Segment::Map { key } => key.replace('~', "~0").replace('/', "~1"),
        Segment::Enum { variant } => variant.clone(),
        Segment::Unknown => "?".into(),
    }
}

/// Load `path` (or an empty document), apply `overrides` in order, validate.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config { pointer: String::new(), message: e.to_string() })?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (keys, value) = parse_override(o)?;
        apply_override(&mut doc, &keys, value)?;
    }
    let cfg = from_value(doc)?;
    validate(&cfg)?;
    Ok(cfg)
}

fn check(pointer: &str, r: eqar_core::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::Config { pointer: pointer.into(), message: e.to_string() })
}

/// Semantic checks that the schema cannot express.
pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    check("/train", cfg.train.validate())?;
    check("/sampler", cfg.sampler.validate())?;
    check("/data", cfg.data.validate())?;
    check("/generator", cfg.generator.validate())?;
    Ok(())
}
