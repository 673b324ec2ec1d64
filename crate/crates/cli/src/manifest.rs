//! Run manifests: what was run, on which inputs, producing which bytes.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    /// Absent for generated sources such as `synth://` URIs.
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, replayable as given.
    pub args: Vec<String>,
    /// `LNTUNE_SEED` at the time of the run.
    pub env_seed: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory; `-` is standard output.
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an input source; generated sources are recorded without one.
pub fn hash_input(source: &str) -> Result<FileHash> {
    let sha256 = if source.starts_with("synth://") {
        None
    } else {
        let bytes = std::fs::read(source).with_context(|| format!("reading {source}"))?;
        Some(sha256_hex(&bytes))
    };
    Ok(FileHash {
        path: source.to_string(),
        sha256,
    })
}
