//! Reproducibility envelope attached to every output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Every resolved parameter except thread count and output location,
    /// neither of which can change a result.
    pub config: BTreeMap<String, Value>,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    /// SHA-256 of each input file, keyed by the flag that named it.
    pub input_digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: Vec::new(),
            input_digests: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let value = serde_json::to_value(value).expect("config values are plain data");
        self.config.insert(key.to_string(), value);
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seeds.push(seed);
        self
    }

    /// Record the digest of `path` under `flag` and its path in the config.
    pub fn input(&mut self, flag: &str, path: &Path) -> Result<&mut Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("--{flag} {}: {e}", path.display())))?;
        self.input_digests.insert(flag.to_string(), sha256_hex(&bytes));
        self.set(flag, path.display().to_string());
        Ok(self)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("manifest is plain data")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn config_is_sorted() {
        let mut m = RunManifest::new("x");
        m.set("zeta", 1).set("alpha", 2);
        let text = serde_json::to_string(&m.to_json()).unwrap();
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
    }
}
