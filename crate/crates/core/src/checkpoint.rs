//! Checkpoints: JSON weights file plus a JSON manifest (kind, parameter
//! count, seed, SHA-256 of the weights, free-form metadata). Loading
//! verifies the hash so silent corruption surfaces as an error instead of a
//! mysteriously degraded model.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// e.g. "embedder", "attack", "discriminator", "student"
    pub kind: String,
    pub param_count: usize,
    pub seed: u64,
    /// Weights file name, relative to the manifest's directory.
    pub weights_file: String,
    pub weights_sha256: String,
    /// Kind-specific details: architecture spec, tau/metric, teacher
    /// provenance hash, and so on.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes `<name>.weights.json` and `<name>.manifest.json` into `dir`;
/// returns the manifest path.
pub fn save_checkpoint<M: Serialize>(
    dir: &Path,
    name: &str,
    model: &M,
    kind: &str,
    param_count: usize,
    seed: u64,
    metadata: serde_json::Value,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let weights_file = format!("{name}.weights.json");
    let weights = serde_json::to_vec(model)?;
    std::fs::write(dir.join(&weights_file), &weights)?;
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        param_count,
        seed,
        weights_sha256: sha256_hex(&weights),
        weights_file,
        metadata,
    };
    let manifest_path = dir.join(format!("{name}.manifest.json"));
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest_path)
}

pub fn load_manifest(manifest_path: &Path) -> Result<CheckpointManifest> {
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    Ok(serde_json::from_slice(&std::fs::read(manifest_path)?)?)
}

/// Loads the weights named by the manifest and checks their SHA-256.
pub fn load_checkpoint<M: DeserializeOwned>(
    manifest_path: &Path,
) -> Result<(M, CheckpointManifest)> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let weights_path = dir.join(&manifest.weights_file);
    if !weights_path.exists() {
        return Err(Error::MissingArtifact(weights_path.display().to_string()));
    }
    let bytes = std::fs::read(&weights_path)?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.weights_sha256 {
        return Err(Error::InvalidArgument(format!(
            "checkpoint hash mismatch for {}: manifest {} vs file {}",
            weights_path.display(),
            manifest.weights_sha256,
            actual
        )));
    }
    Ok((serde_json::from_slice(&bytes)?, manifest))
}
