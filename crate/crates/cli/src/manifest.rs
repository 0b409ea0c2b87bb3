//! Run manifest: config hash, artifact content hashes, and per-stage
//! wall-clock + metrics. Every write re-verifies that listed files exist
//! and hash-match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skelact::hash::sha256_hex;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub wall_ms: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub stages: Vec<StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            artifacts: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn path_in(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    /// Load the existing manifest when its config hash matches; start
    /// fresh otherwise.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Self {
        let path = Self::path_in(out_dir);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
                if manifest.config_hash == config_hash {
                    return manifest;
                }
            }
        }
        Self::new(config_hash)
    }

    /// Record (or replace) an artifact, hashing its current content.
    pub fn record_artifact(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            CliError::Other(anyhow::anyhow!("hashing artifact '{}': {e}", path.display()))
        })?;
        let entry = ArtifactEntry {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        };
        match self.artifacts.iter_mut().find(|a| a.name == name) {
            Some(existing) => *existing = entry,
            None => self.artifacts.push(entry),
        }
        Ok(())
    }

    pub fn record_stage(&mut self, name: &str, wall_ms: u64, metrics: BTreeMap<String, f64>) {
        let entry = StageEntry {
            name: name.to_string(),
            wall_ms,
            metrics,
        };
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(existing) => *existing = entry,
            None => self.stages.push(entry),
        }
    }

    pub fn artifact_path(&self, name: &str) -> Option<PathBuf> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| PathBuf::from(&a.path))
    }

    /// Check that every listed artifact exists and hash-matches.
    pub fn verify(&self) -> Result<(), CliError> {
        for artifact in &self.artifacts {
            let bytes = std::fs::read(&artifact.path).map_err(|e| {
                CliError::Other(anyhow::anyhow!(
                    "manifest artifact '{}' unreadable: {e}",
                    artifact.path
                ))
            })?;
            let hash = sha256_hex(&bytes);
            if hash != artifact.sha256 {
                return Err(CliError::Other(anyhow::anyhow!(
                    "manifest hash mismatch for '{}': {} != {}",
                    artifact.name,
                    hash,
                    artifact.sha256
                )));
            }
        }
        Ok(())
    }

    /// Verify then persist.
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        self.verify()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Other(anyhow::anyhow!("manifest serialization: {e}")))?;
        std::fs::write(Self::path_in(out_dir), text)
            .map_err(|e| CliError::Other(anyhow::anyhow!("manifest write: {e}")))?;
        Ok(())
    }
}

/// Exclusive lock on an output directory: one writer at a time. The lock
/// file is removed when the guard drops.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| CliError::Other(anyhow::anyhow!("creating out dir: {e}")))?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "output directory '{}' is locked by another run (remove {} if stale)",
                    out_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::Other(anyhow::anyhow!("lock: {e}"))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
