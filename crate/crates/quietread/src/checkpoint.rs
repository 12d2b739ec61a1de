//! Portable, bit-exact parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest records a format version, an arbitrary JSON config echo, and
//! one record per tensor (name, shape, dtype, byte offset, byte length) in
//! serialization order; `weights.bin` is the little-endian float32 tensor
//! data concatenated in manifest order. The same layout stores model
//! parameters, connector parameters, and optimizer moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported format version {0}")]
    FormatVersion(u32),
    #[error("tensor {name}: unsupported dtype {dtype}")]
    Dtype { name: String, dtype: String },
    #[error("tensor {name}: shape {shape:?} implies {expected} bytes, manifest says {got}")]
    ShapeBytes {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor {name}: byte range {offset}..{end} exceeds weights file of {file_len} bytes")]
    Truncated {
        name: String,
        offset: usize,
        end: usize,
        file_len: usize,
    },
    #[error("manifest field {0} missing or malformed")]
    Field(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes a parameter store with an arbitrary JSON config echo.
pub fn save_store(dir: &Path, store: &ParamStore<f32>, config: &serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 4);
    for (name, tensor) in store.iter() {
        let byte_offset = blob.len();
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "float32".to_string(),
            byte_offset,
            byte_len: blob.len() - byte_offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors: records,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(io_err(&manifest_path))?;

    let weights_path = dir.join(WEIGHTS_FILE);
    std::fs::File::create(&weights_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(io_err(&weights_path))?;
    Ok(())
}

/// Loads a store saved by [`save_store`], verifying version, dtypes, shapes,
/// and byte ranges. The returned config echo is whatever was saved.
pub fn load_store(dir: &Path) -> Result<(ParamStore<f32>, serde_json::Value), CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = {
        let f = std::fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
        serde_json::from_reader(f)?
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::FormatVersion(manifest.format_version));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let mut blob = Vec::new();
    std::fs::File::open(&weights_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(io_err(&weights_path))?;

    let mut store = ParamStore::new();
    for rec in manifest.tensors {
        if rec.dtype != "float32" {
            return Err(CheckpointError::Dtype { name: rec.name, dtype: rec.dtype });
        }
        let numel: usize = rec.shape.iter().product();
        if numel * 4 != rec.byte_len {
            return Err(CheckpointError::ShapeBytes {
                name: rec.name,
                shape: rec.shape,
                expected: numel * 4,
                got: rec.byte_len,
            });
        }
        let end = rec.byte_offset + rec.byte_len;
        if end > blob.len() {
            return Err(CheckpointError::Truncated {
                name: rec.name,
                offset: rec.byte_offset,
                end,
                file_len: blob.len(),
            });
        }
        let data: Vec<f32> = blob[rec.byte_offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(rec.shape.clone(), data).map_err(|_| CheckpointError::ShapeBytes {
            name: rec.name.clone(),
            shape: rec.shape.clone(),
            expected: numel * 4,
            got: rec.byte_len,
        })?;
        store.insert(rec.name, tensor)?;
    }
    Ok((store, manifest.config))
}

/// Saves model parameters with their [`ModelConfig`] echoed in the manifest.
pub fn save_checkpoint(dir: &Path, store: &ParamStore<f32>, config: &ModelConfig) -> Result<(), CheckpointError> {
    save_store(dir, store, &serde_json::to_value(config)?)
}

/// Loads model parameters and the [`ModelConfig`] they were saved with.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, ModelConfig), CheckpointError> {
    let (store, config) = load_store(dir)?;
    let config: ModelConfig =
        serde_json::from_value(config).map_err(|_| CheckpointError::Field("config"))?;
    Ok((store, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use crate::tensor::IntMatrix;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    #[test]
    fn round_trip_is_bitwise_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params::<f32>(&cfg(), 42).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&a, &store, &cfg()).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&a).unwrap();
        assert_eq!(loaded_cfg, cfg());
        for ((n1, t1), (n2, t2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // save→load→save produces byte-identical weights files.
        save_checkpoint(&b, &loaded, &loaded_cfg).unwrap();
        assert_eq!(
            std::fs::read(a.join(WEIGHTS_FILE)).unwrap(),
            std::fs::read(b.join(WEIGHTS_FILE)).unwrap()
        );
        assert_eq!(
            std::fs::read(a.join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn forward_outputs_survive_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params::<f32>(&cfg(), 9).unwrap();
        let tokens = IntMatrix::new(1, 6, vec![1, 5, 3, 12, 0, 7]);
        let before = forward(&store, &cfg(), &tokens, None).unwrap();
        save_checkpoint(dir.path(), &store, &cfg()).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(dir.path()).unwrap();
        let after = forward(&loaded, &loaded_cfg, &tokens, None).unwrap();
        for (x, y) in before.logits.data().iter().zip(after.logits.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupt_manifest_shape_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params::<f32>(&cfg(), 3).unwrap();
        save_checkpoint(dir.path(), &store, &cfg()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        // token_embedding is [13, 8]; corrupt its shape.
        let corrupted = text.replacen("13,", "14,", 1);
        assert_ne!(text, corrupted);
        std::fs::write(&manifest_path, corrupted).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(
            err.to_string().contains("token_embedding"),
            "error should name the tensor: {err}"
        );
    }

    #[test]
    fn truncated_weights_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params::<f32>(&cfg(), 3).unwrap();
        save_checkpoint(dir.path(), &store, &cfg()).unwrap();
        let weights_path = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&weights_path).unwrap();
        std::fs::write(&weights_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            CheckpointError::Truncated { .. }
        ));
    }

    #[test]
    fn unknown_format_version_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = init_params::<f32>(&cfg(), 3).unwrap();
        save_checkpoint(dir.path(), &store, &cfg()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            CheckpointError::FormatVersion(99)
        ));
    }
}
