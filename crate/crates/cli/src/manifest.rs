//! Run manifest: the ledger of a run directory.
//!
//! Every stage records its artifacts (path + content hash) here. The
//! manifest is rewritten atomically (write to a temp file, then rename), so
//! a crash mid-stage never leaves a half-updated ledger. Downstream stages
//! verify the recorded hashes before trusting an artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub completed_ms: u128,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub created_ms: u128,
    pub updated_ms: u128,
    pub dataset_root: String,
    pub dataset_fingerprint: String,
    pub config_toml: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of a dataset root: every file under train/, test/ and
/// test_label/ (or *.txt at the root for the flat layout), hashed with its
/// relative path in sorted order.
pub fn fingerprint_dataset(root: &Path) -> Result<String, CliError> {
    let mut files: Vec<PathBuf> = Vec::new();
    for sub in ["train", "test", "test_label"] {
        let dir = root.join(sub);
        if dir.is_dir() {
            collect_txt(&dir, &mut files)?;
        }
    }
    if files.is_empty() {
        collect_txt(root, &mut files)?;
    }
    files.sort();
    let mut hasher = Sha256::new();
    for file in &files {
        let rel = file.strip_prefix(root).unwrap_or(file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let bytes = std::fs::read(file)
            .map_err(|e| CliError::runtime(format!("reading {}: {e}", file.display())))?;
        hasher.update(&bytes);
        hasher.update([0]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn collect_txt(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::runtime(e.to_string()))?
            .path();
        if path.extension().is_some_and(|e| e == "txt") {
            out.push(path);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(
        run_id: String,
        dataset_root: String,
        dataset_fingerprint: String,
        config_toml: String,
    ) -> Self {
        let now = now_ms();
        Self {
            run_id,
            created_ms: now,
            updated_ms: now,
            dataset_root,
            dataset_fingerprint,
            config_toml,
            stages: BTreeMap::new(),
        }
    }

    pub fn path_in(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>, CliError> {
        let path = Self::path_in(run_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::runtime(format!("reading manifest: {e}")))?;
        let manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::ArtifactCorrupt(format!("manifest.json: {e}")))?;
        Ok(Some(manifest))
    }

    /// Write-temp-then-rename so the manifest swap is atomic.
    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = Self::path_in(run_dir);
        let tmp = run_dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("serializing manifest: {e}")))?;
        std::fs::write(&tmp, text)
            .map_err(|e| CliError::runtime(format!("writing manifest: {e}")))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| CliError::runtime(format!("renaming manifest: {e}")))?;
        Ok(())
    }

    /// Record a completed stage: hash the artifact files and persist.
    pub fn record_stage(
        &mut self,
        run_dir: &Path,
        stage: &str,
        artifact_paths: &[PathBuf],
    ) -> Result<(), CliError> {
        let mut artifacts = Vec::with_capacity(artifact_paths.len());
        for path in artifact_paths {
            let rel = path
                .strip_prefix(run_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            artifacts.push(ArtifactRecord {
                path: rel,
                sha256: hash_file(path)?,
            });
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                completed_ms: now_ms(),
                artifacts,
            },
        );
        self.updated_ms = now_ms();
        self.save(run_dir)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }

    /// True when the stage is recorded and all its artifacts still match
    /// their hashes. A recorded artifact that is missing or altered is an
    /// error, not a stale cache.
    pub fn stage_intact(&self, run_dir: &Path, name: &str) -> Result<bool, CliError> {
        let Some(record) = self.stages.get(name) else {
            return Ok(false);
        };
        for artifact in &record.artifacts {
            let path = run_dir.join(&artifact.path);
            if !path.exists() {
                return Err(CliError::ArtifactCorrupt(format!(
                    "{} (recorded by stage {name}) is missing",
                    artifact.path
                )));
            }
            if hash_file(&path)? != artifact.sha256 {
                return Err(CliError::ArtifactCorrupt(format!(
                    "{} does not match the hash recorded by stage {name}",
                    artifact.path
                )));
            }
        }
        Ok(true)
    }

    /// Fetch an artifact of a completed dependency stage, verifying its
    /// hash.
    pub fn require_artifact(
        &self,
        run_dir: &Path,
        stage: &str,
        file: &str,
    ) -> Result<PathBuf, CliError> {
        let record = self.stages.get(stage).ok_or_else(|| {
            CliError::StageDependencyMissing(format!(
                "stage `{stage}` has not run (needed for {file})"
            ))
        })?;
        let artifact = record
            .artifacts
            .iter()
            .find(|a| a.path == file)
            .ok_or_else(|| {
                CliError::ArtifactCorrupt(format!("stage `{stage}` did not record {file}"))
            })?;
        let path = run_dir.join(&artifact.path);
        if !path.exists() {
            return Err(CliError::ArtifactCorrupt(format!("{file} is missing")));
        }
        if hash_file(&path)? != artifact.sha256 {
            return Err(CliError::ArtifactCorrupt(format!(
                "{file} does not match its recorded hash"
            )));
        }
        Ok(path)
    }
}
