//! Run manifests: what was run, on what, and what came out.
//!
//! Output files are identified by a git-style content hash: SHA-256 over
//! `"blob <len>\0"` followed by the bytes, as in git's SHA-256 object format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, with input paths made absolute.
    pub args: Vec<String>,
    /// Resolved run config as TOML, when the command has one.
    pub config: Option<String>,
    /// Content hash of the input dataset file.
    pub dataset_hash: Option<String>,
    pub checkpoint: Option<PathBuf>,
    /// Output file name (relative to the run directory) to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            config: None,
            dataset_hash: None,
            checkpoint: None,
            outputs: BTreeMap::new(),
        }
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.insert(name.to_string(), blob_hash(bytes));
        Ok(path)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Output names whose hashes differ between two manifests, including
    /// names present in only one of them.
    pub fn differing_outputs(&self, other: &Self) -> Vec<String> {
        let mut names: Vec<String> = self.outputs.keys().chain(other.outputs.keys()).cloned().collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .filter(|n| self.outputs.get(n) != other.outputs.get(n))
            .collect()
    }
}
