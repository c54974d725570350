//! Run manifests: enough metadata to reproduce a run exactly, written
//! atomically when the run finishes.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub build: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub outputs: Vec<String>,
}

pub fn config_hash(resolved_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(resolved_toml.as_bytes());
    format!("{:x}", h.finalize())
}

pub fn now_unix_s() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Write via a temp file and rename, so a manifest is either absent or
    /// complete.
    pub fn write_atomic(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, text + "\n")?;
        std::fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }
}
