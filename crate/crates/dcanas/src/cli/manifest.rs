//! Run manifests: every command writes one before starting work and
//! finalizes it on completion, so every artifact can be traced back to the
//! exact resolved configuration and inputs that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::lug::hex_string;

#[derive(Serialize, Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved flat configuration (canonical key order).
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Content hashes of input files, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub ended_unix: Option<u64>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunManifest {
    pub fn new(
        command: &str,
        argv: Vec<String>,
        config: BTreeMap<String, String>,
        seed: u64,
        deterministic: bool,
    ) -> Self {
        let canonical: String = config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let config_hash = sha256_hex(canonical.as_bytes());
        RunManifest {
            command: command.to_string(),
            argv,
            config,
            config_hash,
            seed,
            deterministic,
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: now_unix(),
            ended_unix: None,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs
            .insert(role.to_string(), format!("sha256:{}", hash_file(path)?));
        Ok(())
    }

    pub fn add_input_value(&mut self, role: &str, value: &str) {
        self.inputs
            .insert(role.to_string(), format!("sha256:{}", sha256_hex(value.as_bytes())));
    }

    pub fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Short id prefix used in metrics records.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.config_hash[..12], self.seed)
    }

    pub fn write(&self, path: &PathBuf) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn finalize(&mut self, path: &PathBuf) -> Result<()> {
        self.ended_unix = Some(now_unix());
        self.write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_hashes_config() {
        let mut cfg = BTreeMap::new();
        cfg.insert("a.b".to_string(), "1".to_string());
        let mut m = RunManifest::new("search", vec!["dcanas".into()], cfg.clone(), 3, true);
        assert_eq!(m.run_id().len(), 12 + 3);
        cfg.insert("a.b".to_string(), "2".to_string());
        let m2 = RunManifest::new("search", vec!["dcanas".into()], cfg, 3, true);
        assert_ne!(m.config_hash, m2.config_hash);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        m.finalize(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("ended_unix"));
    }
}
