//! Named-tensor checkpoint files.
//!
//! Layout: the magic bytes `AESM`, a little-endian `u32` format version, a
//! little-endian `u64` byte length followed by a UTF-8 JSON metadata block
//! (model config, element type, and each tensor's name, shape and byte
//! offset), then the raw little-endian tensor data in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AesError, Result};
use crate::model::{param_shapes, ModelConfig};
use crate::tensor::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"AESM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(params: &ParamStore<T>, config: &ModelConfig) -> Vec<u8> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.numel() * T::DTYPE.size_bytes();
    }
    let meta = CheckpointMeta {
        config: config.clone(),
        dtype: T::DTYPE,
        tensors,
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for &x in &t.data {
            x.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(
    params: &ParamStore<T>,
    config: &ModelConfig,
    path: &Path,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)).map_err(|e| AesError::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> AesError {
    AesError::CorruptCheckpoint(msg.into())
}

/// Parses the header and metadata, returning it with the start of the data
/// section.
pub fn read_meta(bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing AESM magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("metadata block is truncated"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(format!("bad metadata: {e}")))?;
    Ok((meta, data_start))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, ModelConfig)> {
    let (meta, data_start) = read_meta(bytes)?;
    if meta.dtype != T::DTYPE {
        return Err(corrupt(format!(
            "checkpoint holds {:?} tensors, requested {:?}",
            meta.dtype,
            T::DTYPE
        )));
    }
    meta.config
        .validate()
        .map_err(|e| corrupt(format!("stored config is invalid: {e}")))?;

    let expected = param_shapes(&meta.config);
    if expected.len() != meta.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors for the stored config, found {}",
            expected.len(),
            meta.tensors.len()
        )));
    }
    let width = T::DTYPE.size_bytes();
    let data = &bytes[data_start..];
    let mut cursor = 0;
    let mut store = ParamStore::new();
    for ((name, shape), entry) in expected.into_iter().zip(&meta.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(corrupt(format!("tensor {name} has offset {}", entry.offset)));
        }
        let n: usize = shape.iter().product();
        let end = cursor + n * width;
        let raw = data
            .get(cursor..end)
            .ok_or_else(|| corrupt(format!("tensor data for {name} is truncated")))?;
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        store.insert(name, Tensor { shape, data: values });
        cursor = end;
    }
    if cursor != data.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after tensor data",
            data.len() - cursor
        )));
    }
    Ok((store, meta.config))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| AesError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Element type recorded in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| AesError::io(path, e))?;
    Ok(read_meta(&bytes)?.0.dtype)
}
