//! Model persistence: a length-prefixed JSON header describing named
//! tensors, followed by a little-endian f32 blob.
//!
//! Layout: `u64 LE header_len | header JSON | blob`. Header schema:
//! `{format_version, config, tensors:[{name, shape, offset}]}` where
//! `offset` is the tensor's byte offset inside the blob. The loader
//! validates the total length and every shape before touching a model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::NnError;
use crate::scalar::Real;
use crate::transformer::ParamSet;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// Write `params` (as f32, in registry order) plus a serializable config.
pub fn save_checkpoint<T: Real, C: Serialize>(
    path: &Path,
    config: &C,
    params: &ParamSet<T>,
) -> Result<(), NnError> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, p) in params.iter() {
        let (rows, cols) = p.shape();
        tensors.push(TensorMeta {
            name: name.to_string(),
            shape: vec![rows, cols],
            offset,
        });
        offset += (p.numel() * 4) as u64;
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: serde_json::to_value(config)?,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, p) in params.iter() {
        for v in p.to_vec() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header, NnError> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok(header)
}

/// Read only the config object from a checkpoint header.
pub fn load_checkpoint_config<C: DeserializeOwned>(path: &Path) -> Result<C, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    Ok(serde_json::from_value(header.config)?)
}

/// Load tensor values into an already-built parameter set.
///
/// The file must contain exactly the parameters of `params`, with
/// matching shapes; order may differ. Returns the stored config.
pub fn load_checkpoint_into<T: Real, C: DeserializeOwned>(
    path: &Path,
    params: &ParamSet<T>,
) -> Result<C, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let expected_blob: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() != expected_blob {
        return Err(NnError::Checkpoint(format!(
            "blob length {} does not match header total {}",
            blob.len(),
            expected_blob
        )));
    }
    if header.tensors.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for meta in &header.tensors {
        let p = params.get(&meta.name).ok_or_else(|| {
            NnError::Checkpoint(format!("unknown tensor `{}` in checkpoint", meta.name))
        })?;
        let (rows, cols) = p.shape();
        if meta.shape != vec![rows, cols] {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` shape {:?} does not match model {:?}",
                meta.name,
                meta.shape,
                (rows, cols)
            )));
        }
        let n = rows * cols;
        let start = meta.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` extends past blob end",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(NnError::Checkpoint(format!(
                    "non-finite value in tensor `{}`",
                    meta.name
                )));
            }
            data.push(T::from_f64(v as f64));
        }
        p.set_data(&data);
    }
    Ok(serde_json::from_value(header.config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{ModelConfig, ParamBuilder};

    fn build_set(seed: u64) -> ParamSet<f32> {
        let mut pb = ParamBuilder::<f32>::new(seed);
        pb.xavier("a", 3, 4);
        pb.xavier("b", 2, 2);
        pb.zeros("c", 1, 5);
        pb.finish()
    }

    #[test]
    fn round_trip_preserves_values_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::default();
        let src = build_set(11);
        save_checkpoint(&path, &cfg, &src).unwrap();

        let dst = build_set(99); // different init, same architecture
        let loaded: ModelConfig = load_checkpoint_into(&path, &dst).unwrap();
        assert_eq!(loaded, cfg);
        for (name, p) in src.iter() {
            assert_eq!(p.to_vec(), dst.get(name).unwrap().to_vec(), "{name}");
        }
    }

    #[test]
    fn config_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig {
            d_model: 32,
            ..ModelConfig::default()
        };
        save_checkpoint(&path, &cfg, &build_set(1)).unwrap();
        let loaded: ModelConfig = load_checkpoint_config(&path).unwrap();
        assert_eq!(loaded.d_model, 32);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ModelConfig::default(), &build_set(1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let dst = build_set(2);
        let res: Result<ModelConfig, _> = load_checkpoint_into(&path, &dst);
        assert!(matches!(res, Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ModelConfig::default(), &build_set(1)).unwrap();
        let mut pb = ParamBuilder::<f32>::new(0);
        pb.xavier("a", 3, 4);
        pb.xavier("b", 2, 3); // wrong shape
        pb.zeros("c", 1, 5);
        let dst = pb.finish();
        let res: Result<ModelConfig, _> = load_checkpoint_into(&path, &dst);
        assert!(matches!(res, Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn unknown_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ModelConfig::default(), &build_set(1)).unwrap();
        let mut pb = ParamBuilder::<f32>::new(0);
        pb.xavier("a", 3, 4);
        pb.xavier("renamed", 2, 2);
        pb.zeros("c", 1, 5);
        let dst = pb.finish();
        let res: Result<ModelConfig, _> = load_checkpoint_into(&path, &dst);
        assert!(matches!(res, Err(NnError::Checkpoint(_))));
    }
}
