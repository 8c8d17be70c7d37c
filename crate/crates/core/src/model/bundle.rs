//! Weight bundle: `bundle.json` manifest plus one little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{ModelConfig, ToyModel};

pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const BUNDLE_BLOB: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes the bundle into `dir` and returns the manifest.
pub fn write_bundle(model: &ToyModel, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in model.tensors() {
        let bytes = m.to_le_bytes();
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            dtype: "f32".into(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = BundleManifest {
        format_version: 1,
        config: model.config().clone(),
        blob: BUNDLE_BLOB.into(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    fs::write(dir.join(BUNDLE_BLOB), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(BUNDLE_MANIFEST), json)?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<ToyModel> {
    let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join(BUNDLE_MANIFEST))?)?;
    if manifest.format_version != 1 {
        return Err(Error::Config(format!(
            "unsupported bundle format version {}",
            manifest.format_version
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path)?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != manifest.blob_sha256 {
        return Err(Error::Checksum {
            path: blob_path,
            expected: manifest.blob_sha256,
            actual,
        });
    }
    let mut model = ToyModel::zeros(manifest.config.clone())?;
    let expected_names = ToyModel::tensor_names(&manifest.config);
    if manifest.tensors.len() != expected_names.len() {
        return Err(Error::Config(format!(
            "bundle lists {} tensors, model needs {}",
            manifest.tensors.len(),
            expected_names.len()
        )));
    }
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Config(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let [rows, cols] = entry.shape;
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if entry.length as usize != rows * cols * 4 || end > blob.len() {
            return Err(Error::Config(format!("tensor {} has inconsistent extent", entry.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.set_tensor(&entry.name, Matrix::from_vec(rows, cols, data)?)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            n_layers: 2,
            ..ModelConfig::toy(17)
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::build(cfg()).unwrap();
        let manifest = write_bundle(&model, dir.path()).unwrap();
        assert_eq!(manifest.tensors.len(), 2 + 2 * 7);
        assert_eq!(manifest.tensors[0].offset, 0);
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn identical_models_write_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_bundle(&ToyModel::build(cfg()).unwrap(), a.path()).unwrap();
        write_bundle(&ToyModel::build(cfg()).unwrap(), b.path()).unwrap();
        for f in [BUNDLE_BLOB, BUNDLE_MANIFEST] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&ToyModel::build(cfg()).unwrap(), dir.path()).unwrap();
        let path = dir.path().join(BUNDLE_BLOB);
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checksum { .. })));
    }
}
