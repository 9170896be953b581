//! Checkpoint directories: `manifest.json` plus `params.bin`, a contiguous
//! blob of little-endian `f32` values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "ejection-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub epoch: usize,
    pub config: ModelConfig,
    pub total_bytes: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save(dir: &Path, model: &Model, epoch: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.params().len());
    let mut blob = Vec::with_capacity(4 * model.parameter_count());
    for p in model.params().iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            len: p.value.len(),
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        seed: model.config().seed,
        epoch,
        config: model.config().clone(),
        total_bytes: blob.len(),
        params: entries,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::FormatError(e.to_string()))?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::FormatError(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::FormatError(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and fills in its weights.
pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.config.clone())?;
    fill(dir, &manifest, &mut model)?;
    Ok((model, manifest))
}

/// Loads weights into an existing model; names and shapes must match.
pub fn load_into(dir: &Path, model: &mut Model) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    fill(dir, &manifest, model)?;
    Ok(manifest)
}

fn fill(dir: &Path, manifest: &Manifest, model: &mut Model) -> Result<()> {
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::FormatError(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let store = model.params_mut();
    if manifest.params.len() != store.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for (i, entry) in manifest.params.iter().enumerate() {
        let param = store.by_index_mut(i);
        if param.name != entry.name || param.value.shape() != entry.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                entry.name,
                entry.shape,
                param.name,
                param.value.shape()
            )));
        }
        let end = entry.offset + 4 * entry.len;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::FormatError(format!("{} runs past the blob", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(())
}
