// SPDX-License-Identifier: MIT OR Apache-2.0

//! Content hashes and the provenance block embedded in every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("headscope ", env!("CARGO_PKG_VERSION"));

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON encoding. Struct fields serialize in
/// declaration order and maps in this crate are `BTreeMap`s, so the
/// encoding is canonical.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("value serializes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub config_hash: String,
    pub inputs: Vec<(String, String)>,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Provenance {
            tool: TOOL_VERSION.into(),
            config_hash: config_hash.into(),
            inputs: Vec::new(),
            seed: None,
        }
    }

    pub fn input(mut self, name: impl Into<String>, hash: impl Into<String>) -> Self {
        self.inputs.push((name.into(), hash.into()));
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// `# key=value` lines for the head of a CSV file.
    pub fn csv_header(&self) -> String {
        let mut s = format!("# tool={}\n# config_hash={}\n", self.tool, self.config_hash);
        for (name, hash) in &self.inputs {
            s.push_str(&format!("# input.{name}={hash}\n"));
        }
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed={seed}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            hash_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
