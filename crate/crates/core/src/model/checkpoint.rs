//! Checkpoints: a JSON manifest next to one little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parameter_layout, ModelConfig, ModelError, ModelState};
use crate::autodiff::Tensor;

pub const CHECKPOINT_FORMAT: &str = "sheafrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    n_users: usize,
    n_items: usize,
    /// Blob file name, relative to the manifest.
    blob: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` (manifest) and the blob beside it with extension `.bin`.
/// Returns both paths.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(PathBuf, PathBuf), ModelError> {
    let blob = blob_path(path);
    let params = state.parameters();
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        n_users: state.n_users,
        n_items: state.n_items,
        blob: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(state.parameter_count() * 4);
    for (_, t) in &params {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(io_err(path))?;
    fs::write(&blob, bytes).map_err(io_err(&blob))?;
    Ok((path.to_path_buf(), blob))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let bad = |message: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let expected = parameter_layout(&manifest.config, manifest.n_users, manifest.n_items);
    let listed: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if listed != expected {
        return Err(bad("tensor list does not match the configuration".into()));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(bad(format!("blob holds {} bytes, expected {}", bytes.len(), total * 4)));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let tensors = expected
        .iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape.clone(), values.by_ref().take(n).collect()).expect("sized from layout")
        })
        .collect();
    ModelState::from_tensors(manifest.config, manifest.n_users, manifest.n_items, tensors)
}
