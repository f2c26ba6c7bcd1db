//! Run manifests: the resolved configuration, the seed and a SHA-256 of every
//! artifact, written as `manifest.json` next to the artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub verb: String,
    pub seed: Option<u64>,
    /// Resolved experiment configuration as TOML, when the verb has one.
    pub config: Option<String>,
    /// Verb-specific inputs that are not part of the configuration.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the output directory mapped to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(verb: &str, seed: Option<u64>, config: Option<String>) -> Self {
        Manifest {
            tool: format!("scala-opt {}", env!("CARGO_PKG_VERSION")),
            verb: verb.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn add_artifacts(&mut self, root: &Path, paths: &[PathBuf]) -> Result<(), CliError> {
        for p in paths {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let key = rel.to_string_lossy().replace('\\', "/");
            self.artifacts.insert(key, sha256_file(p)?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
