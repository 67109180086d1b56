//! Versioned on-disk snapshots: `manifest.json` plus one contiguous blob of
//! little-endian `f32` arrays.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::RngState;
use crate::training::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub epoch: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub optimizer_step: u64,
    pub rng: Option<RngState>,
    pub blob: String,
    pub blob_nbytes: u64,
    pub blob_sha256: String,
    pub arrays: Vec<ArrayEntry>,
}

/// Parameters, optimizer state and bookkeeping after `epoch` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config_hash: String,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub rng: Option<RngState>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn checkpoint_dir_name(epoch: u64) -> String {
    format!("epoch_{epoch}")
}

fn groups(ck: &Checkpoint) -> [(&'static str, &ModelParams<f32>); 3] {
    [
        ("params", &ck.params),
        ("adam_m", &ck.optimizer.m),
        ("adam_v", &ck.optimizer.v),
    ]
}

/// Writes `parent/epoch_<N>/` atomically (temp directory, then rename) and
/// returns its path. An existing snapshot for the same epoch is replaced.
pub fn save_checkpoint(ck: &Checkpoint, parent: &Path) -> Result<PathBuf> {
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = checkpoint_dir_name(ck.epoch);
    let final_dir = parent.join(&name);
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    for (prefix, p) in groups(ck) {
        for t in p.tensors() {
            let start = blob.len();
            for x in t.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            arrays.push(ArrayEntry {
                name: format!("{prefix}.{}", t.name),
                shape: t.shape,
                dtype: "f32".into(),
                offset: start as u64,
                nbytes: (blob.len() - start) as u64,
                sha256: sha_hex(&blob[start..]),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        epoch: ck.epoch,
        config_hash: ck.config_hash.clone(),
        model: ck.params.config.clone(),
        optimizer_step: ck.optimizer.t,
        rng: ck.rng.clone(),
        blob: BLOB.into(),
        blob_nbytes: blob.len() as u64,
        blob_sha256: sha_hex(&blob),
        arrays,
    };
    let blob_path = tmp.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = tmp.join(MANIFEST);
    fs::write(&man_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(final_dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    // Check the version before the strict schema so newer files get a clear error.
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Integrity {
        path: path.clone(),
        reason: format!("manifest is not valid JSON: {e}"),
    })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Integrity {
            path: path.clone(),
            reason: "manifest has no format_version".into(),
        })?;
    if version > FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Integrity {
        path,
        reason: format!("malformed manifest: {e}"),
    })
}

/// Loads and verifies a snapshot written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let corrupt = |reason: String| Error::Integrity {
        path: blob_path.clone(),
        reason,
    };
    if blob.len() as u64 != manifest.blob_nbytes {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_nbytes
        )));
    }
    if sha_hex(&blob) != manifest.blob_sha256 {
        return Err(corrupt("blob checksum mismatch".into()));
    }

    let mut params = ModelParams::<f32>::zeros(&manifest.model);
    let mut m = params.clone();
    let mut v = params.clone();
    let mut seen = std::collections::HashSet::new();
    for entry in &manifest.arrays {
        if !seen.insert(entry.name.as_str()) {
            return Err(corrupt(format!("array {} listed twice", entry.name)));
        }
    }
    let mut expected = 0;
    for (prefix, target) in [("params", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
        for t in target.tensors_mut() {
            expected += 1;
            let name = format!("{prefix}.{}", t.name);
            let entry = manifest
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| corrupt(format!("array {name} missing")))?;
            if entry.dtype != "f32" {
                return Err(corrupt(format!("array {name} has dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            if n != t.data.len() || entry.nbytes != 4 * n as u64 {
                return Err(corrupt(format!("array {name} has the wrong shape")));
            }
            let start = entry.offset as usize;
            let bytes = blob
                .get(start..start + entry.nbytes as usize)
                .ok_or_else(|| corrupt(format!("array {name} runs past the blob")))?;
            if sha_hex(bytes) != entry.sha256 {
                return Err(corrupt(format!("array {name} checksum mismatch")));
            }
            for (x, c) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
    }
    if expected != manifest.arrays.len() {
        return Err(corrupt("manifest lists unexpected arrays".into()));
    }
    Ok(Checkpoint {
        epoch: manifest.epoch,
        config_hash: manifest.config_hash,
        params,
        optimizer: OptimizerState {
            m,
            v,
            t: manifest.optimizer_step,
        },
        rng: manifest.rng,
    })
}

/// Epoch-sorted snapshots under `parent` (hidden temp directories skipped).
pub fn list_checkpoints(parent: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !parent.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(parent).map_err(|e| Error::io(parent, e))? {
        let entry = entry.map_err(|e| Error::io(parent, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.parse::<u64>().ok()) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}
