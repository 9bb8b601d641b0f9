// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model manifest (JSON) plus one little-endian, row-major `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "headscope-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

/// Writes `<path>` (manifest) and `<path stem>.bin` next to it.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let blob_name = format!("{stem}.bin");
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in model.tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: bytes.len() as u64,
        });
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: model.config.clone(),
        blob: blob_name.clone(),
        tensors,
    };
    let blob = blob_path(path, &blob_name);
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("unsupported manifest format `{}`", manifest.format),
        });
    }
    let blob_file = blob_path(path, &manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;

    let mut model = Model::zeros(manifest.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let mut targets = model.tensors_mut();
    for ((name, shape), (_, target)) in expected.iter().zip(targets.iter_mut()) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Tensor {
                tensor: name.clone(),
                reason: "missing from manifest".into(),
            })?;
        if &entry.shape != shape {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: format!("shape {:?} does not match expected {:?}", entry.shape, shape),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: format!("unsupported dtype `{}`", entry.dtype),
            });
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::io(
                &blob_file,
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!(
                        "blob has {} bytes, tensor `{name}` needs bytes {start}..{end}",
                        blob.len()
                    ),
                ),
            ));
        }
        for (dst, chunk) in target.iter_mut().zip(blob[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::Tensor {
                tensor: name.clone(),
                reason: "contains NaN or infinity".into(),
            });
        }
    }
    drop(targets);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_random, CaptureSpec, TokenSequence};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            vocab_size: 12,
            ffn_hidden: 8,
            max_seq_len: 8,
            final_norm: true,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = init_random(cfg()).unwrap();
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(m, back);
        let s = TokenSequence::from_parts(&[1, 2], &[3], &[4]);
        let a = forward(&m, &s, &CaptureSpec::logits_only()).unwrap();
        let b = forward(&back, &s, &CaptureSpec::logits_only()).unwrap();
        for t in 0..4 {
            assert_eq!(a.logits(t).unwrap(), b.logits(t).unwrap());
        }
    }

    #[test]
    fn wrong_shape_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = init_random(cfg()).unwrap();
        let mut manifest = save_model(&m, &p).unwrap();
        let e = manifest
            .tensors
            .iter_mut()
            .find(|e| e.name == "layers.1.heads.0.w_q")
            .unwrap();
        e.shape = vec![4, 16];
        fs::write(&p, serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_model(&p) {
            Err(Error::Tensor { tensor, .. }) => assert_eq!(tensor, "layers.1.heads.0.w_q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = init_random(cfg()).unwrap();
        save_model(&m, &p).unwrap();
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn nan_weight_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut m = init_random(cfg()).unwrap();
        m.unembed.data[3] = f32::NAN;
        save_model(&m, &p).unwrap();
        match load_model(&p) {
            Err(Error::Tensor { tensor, .. }) => assert_eq!(tensor, "unembed.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&init_random(cfg()).unwrap(), &p).unwrap();
        fs::remove_file(dir.path().join("m.bin")).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Io { .. })));
    }
}
