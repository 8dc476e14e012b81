//! Provenance record written next to every run's artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    /// Every setting the run used, after presets, files and flags.
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// SHA-256 of input files, by role.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each written artifact, by file name.
    pub artifacts: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config_path: Option<PathBuf>,
        resolved: &impl Serialize,
        seed: u64,
        output_dir: &Path,
    ) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            config_path,
            resolved_config: serde_json::to_value(resolved).map_err(|e| Error::Config(e.to_string()))?,
            seed,
            output_dir: output_dir.to_path_buf(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    /// Hashes `dir/name` into the artifact list.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let h = hash_file(&dir.join(name))?;
        self.artifacts.insert(name.into(), h);
        Ok(())
    }

    pub fn write(&self) -> Result<()> {
        let path = self.output_dir.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
