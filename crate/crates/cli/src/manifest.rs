//! Run manifests and content hashes of run inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// SHA-256 of `blob <len>\0<bytes>`, the way git names file contents.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn hash_inputs(files: &[(&str, &Path)]) -> Result<Vec<InputFile>, CliError> {
    files
        .iter()
        .map(|(role, path)| {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            Ok(InputFile {
                role: role.to_string(),
                path: path.to_path_buf(),
                sha256: blob_hash(&bytes),
            })
        })
        .collect()
}

/// One hash over the resolved configuration and every input file's content.
/// Paths and the worker-thread count are left out; inputs are identified by
/// content and threads never change results.
pub fn run_hash(config: &RunConfig, inputs: &[InputFile]) -> Result<String, CliError> {
    let mut cfg = config.clone();
    cfg.train.threads = 1;
    cfg.pretrain.threads = 1;
    cfg.out = PathBuf::new();
    cfg.data = PathBuf::new();
    cfg.val = cfg.val.as_ref().map(|_| PathBuf::new());
    cfg.test = cfg.test.as_ref().map(|_| PathBuf::new());
    let mut h = Sha256::new();
    h.update(blob_hash(&serde_json::to_vec(&cfg)?).as_bytes());
    for f in inputs {
        h.update(f.role.as_bytes());
        h.update(f.sha256.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHashes {
    pub before: String,
    pub after: String,
    pub unchanged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub best_value: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub input_hash: String,
    pub inputs: Vec<InputFile>,
    pub started: String,
    pub finished: String,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Hashes of the frozen parameter groups around fine-tuning.
    pub frozen_groups: BTreeMap<String, GroupHashes>,
    pub fit: FitSummary,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
