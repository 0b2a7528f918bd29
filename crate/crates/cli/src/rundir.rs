//! Run directories: `run-<utc>-<hash of the resolved config>`.

use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const CONFIG_ECHO: &str = "config.json";

/// First eight hex digits of the SHA-256 of the canonical config JSON.
pub fn config_hash(cfg: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..4])
}

/// Create the run directory and echo the resolved configuration into it.
/// An explicit directory is used as is; otherwise a fresh name is chosen
/// under `parent`, with a numeric suffix if the second is already taken.
pub fn create(parent: &Path, explicit: Option<&Path>, cfg: &impl Serialize) -> std::io::Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let base = format!("run-{}-{}", Utc::now().format("%Y%m%dT%H%M%SZ"), config_hash(cfg));
            let mut dir = parent.join(&base);
            let mut i = 1;
            while dir.exists() {
                dir = parent.join(format!("{base}-{i}"));
                i += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(dir.join(CONFIG_ECHO), text + "\n")?;
    Ok(dir)
}
