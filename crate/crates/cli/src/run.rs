//! Provenance record written next to every command's artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use esoseg_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: PathBuf,
    /// Absent for directories and missing files.
    sha256: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    command: String,
    version: &'static str,
    created_unix: u64,
    config: serde_json::Value,
    config_sha256: String,
    seeds: Vec<u64>,
    splits: Vec<u32>,
    inputs: Vec<InputRecord>,
}

impl RunRecord {
    /// The config hash is taken over its canonical JSON serialization.
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_vec(&config)?;
        Ok(RunRecord {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config_sha256: sha256_hex(&canonical),
            config,
            seeds: Vec::new(),
            splits: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn split(mut self, split: u32) -> Self {
        self.splits.push(split);
        self
    }

    pub fn input(mut self, path: PathBuf) -> Self {
        let sha256 = fs::read(&path).ok().map(|b| sha256_hex(&b));
        self.inputs.push(InputRecord { path, sha256 });
        self
    }

    /// Write `run-<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("run-{}.json", self.command));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn same_config_same_hash() {
        let a = RunRecord::new("x", &serde_json::json!({"a": 1, "b": [1, 2]})).unwrap();
        let b = RunRecord::new("y", &serde_json::json!({"b": [1, 2], "a": 1})).unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
    }
}
