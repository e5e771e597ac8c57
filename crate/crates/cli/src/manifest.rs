use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use enrichvec::store::write_atomic;
use enrichvec::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// What a command read, how it was configured and what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileDigest>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    /// Starts a manifest; the config hash covers the canonical JSON of `config`.
    pub fn start(command: &str, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("options serialize");
        RunManifest {
            command: command.to_string(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            config,
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.to_string(), path.to_path_buf());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_at = now();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
