//! Run manifests: every command records its arguments, seed, and input
//! hashes so a run can be reproduced bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Input path -> sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> exitq::Result<()> {
        let bytes = std::fs::read(path)
            .map_err(|e| exitq::Error::io(path.display().to_string(), e))?;
        let digest = Sha256::digest(&bytes);
        self.inputs.insert(path.display().to_string(), hex::encode(digest));
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> exitq::Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| exitq::Error::Invalid(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, text).map_err(|e| exitq::Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}
