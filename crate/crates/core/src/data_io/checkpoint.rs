//! Checkpoint directories: one ETB file per parameter plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/<name>.etb
//! <dir>/ema/<name>.etb      (optional)
//! ```
//!
//! Each manifest entry carries the SHA-256 of the file's payload bytes
//! (everything after the ETB header). The manifest is written last, so a
//! directory with a manifest is complete.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::etb::{decode_as, encode, payload_offset, write_atomic};
use crate::error::{contract, Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub epochs: usize,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub file: String,
    pub name: String,
    pub sha256: String,
    pub shape: Vec<usize>,
}

/// Fields are declared in key order so the serialized JSON is sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub cfg_end: f64,
    /// Snapshot of the model configuration.
    pub config: serde_json::Value,
    pub ema: bool,
    pub ema_params: Vec<ParamEntry>,
    /// Free-form companions, e.g. the tokenizer used to build the corpus.
    #[serde(default)]
    pub extra: serde_json::Value,
    /// `"generator"` or `"tokenizer"`.
    pub kind: String,
    pub params: Vec<ParamEntry>,
    pub provenance: Provenance,
    pub version: u32,
}

/// Everything needed to write a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor<f32>)>,
    pub ema: Option<Vec<Tensor<f32>>>,
    pub cfg_end: f64,
    pub provenance: Provenance,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: &impl Serialize, store: &ParamStore<f32>) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            ema: None,
            cfg_end: 1.0,
            provenance: Provenance::default(),
            extra: serde_json::Value::Null,
        })
    }
}

fn payload_hash(bytes: &[u8]) -> Result<String> {
    let off = payload_offset(bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes[off..])))
}

fn write_group(dir: &Path, sub: &str, named: &[(&str, &Tensor<f32>)]) -> Result<Vec<ParamEntry>> {
    named
        .iter()
        .map(|(name, t)| {
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(contract(format!("parameter name {name:?} is not a safe file name")));
            }
            let file = format!("{sub}/{name}.etb");
            let bytes = encode(*t);
            let sha256 = payload_hash(&bytes)?;
            write_atomic(&dir.join(&file), &bytes)?;
            Ok(ParamEntry { file, name: name.to_string(), sha256, shape: t.shape().to_vec() })
        })
        .collect()
}

/// Write `ckpt` into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let named: Vec<(&str, &Tensor<f32>)> = ckpt.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let params = write_group(dir, "params", &named)?;
    let ema_params = match &ckpt.ema {
        Some(ema) => {
            if ema.len() != named.len() {
                return Err(contract(format!("{} EMA tensors for {} parameters", ema.len(), named.len())));
            }
            let en: Vec<(&str, &Tensor<f32>)> = named.iter().zip(ema).map(|((n, _), t)| (*n, t)).collect();
            write_group(dir, "ema", &en)?
        }
        None => Vec::new(),
    };
    let manifest = CheckpointManifest {
        cfg_end: ckpt.cfg_end,
        config: ckpt.config.clone(),
        ema: ckpt.ema.is_some(),
        ema_params,
        extra: ckpt.extra.clone(),
        kind: ckpt.kind.clone(),
        params,
        provenance: ckpt.provenance.clone(),
        version: MANIFEST_VERSION,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    // Round-trip through `Value` so nested config objects are key-sorted too.
    let value = serde_json::to_value(manifest)?;
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &bytes)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Missing(path));
    }
    let m: CheckpointManifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Integrity(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
    }
    Ok(m)
}

fn read_entry(dir: &Path, e: &ParamEntry) -> Result<Tensor<f32>> {
    let path: PathBuf = dir.join(&e.file);
    if !path.is_file() {
        return Err(Error::Missing(path));
    }
    let bytes = std::fs::read(&path)?;
    let got = payload_hash(&bytes)?;
    if got != e.sha256 {
        return Err(Error::Integrity(format!("{} hash {got} does not match manifest {}", e.file, e.sha256)));
    }
    let t: Tensor<f32> = decode_as(&bytes)?;
    if t.shape() != e.shape.as_slice() {
        return Err(Error::Integrity(format!("{} has shape {:?}, manifest says {:?}", e.file, t.shape(), e.shape)));
    }
    Ok(t)
}

/// Load a checkpoint, verifying every hash. With `use_ema` the EMA weights
/// stand in for the raw ones (an error if the checkpoint has none).
pub fn load_checkpoint(dir: &Path, use_ema: bool) -> Result<(CheckpointManifest, Vec<(String, Tensor<f32>)>)> {
    let m = read_manifest(dir)?;
    let entries = if use_ema {
        if !m.ema {
            return Err(contract(format!("{} has no EMA weights", dir.display())));
        }
        &m.ema_params
    } else {
        &m.params
    };
    let tensors = entries.iter().map(|e| Ok((e.name.clone(), read_entry(dir, e)?))).collect::<Result<Vec<_>>>()?;
    Ok((m, tensors))
}

/// Copy named tensors into a freshly built store, matching by name.
pub fn load_into_store(store: &mut ParamStore<f32>, named: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if named.len() != store.len() {
        return Err(Error::Integrity(format!("checkpoint has {} tensors, model expects {}", named.len(), store.len())));
    }
    for (name, t) in named {
        let id = store.find(&name).ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Integrity(format!("{name}: shape {:?} vs model {:?}", t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
