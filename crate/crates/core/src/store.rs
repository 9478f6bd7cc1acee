//! Binary payloads and checkpoint files.
//!
//! Every artifact is a pair: `<stem>.json` holds a header, `<stem>.bin` holds
//! flat little-endian `f32` values in the order the header lists them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    meta: M,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus typed metadata, read back by [`load_tensors`].
pub struct TensorFile<M> {
    pub kind: String,
    pub meta: M,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save_tensors<M: Serialize>(stem: &Path, kind: &str, meta: &M, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let jp = json_path(stem);
    let text = serde_json::to_string_pretty(&header).map_err(|e| checkpoint_err(&jp, e.to_string()))?;
    fs::write(&jp, text).map_err(|e| Error::io(&jp, e))?;
    let flat: Vec<f32> = tensors.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
    write_f32_le(&bin_path(stem), &flat)
}

pub fn load_tensors<M: DeserializeOwned>(stem: &Path, kind: &str) -> Result<TensorFile<M>> {
    let jp = json_path(stem);
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: Header<M> = serde_json::from_str(&text).map_err(|e| checkpoint_err(&jp, e.to_string()))?;
    if header.kind != kind {
        return Err(checkpoint_err(&jp, format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let total = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let flat = read_f32_le(&bin_path(stem), total)?;
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        tensors.push((e.name, Tensor::new(e.shape, flat[offset..offset + n].to_vec())));
        offset += n;
    }
    Ok(TensorFile { kind: header.kind, meta: header.meta, tensors })
}

/// Parameters as `(name, tensor)` pairs with an optional prefix.
pub fn named<'a>(store: &'a ParamStore<f32>, prefix: &'a str) -> Vec<(String, &'a Tensor<f32>)> {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Splits out every tensor whose name starts with `prefix`, stripping it.
pub fn take_prefixed(tensors: &mut Vec<(String, Tensor<f32>)>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    let (hit, rest): (Vec<_>, Vec<_>) = std::mem::take(tensors).into_iter().partition(|(n, _)| n.starts_with(prefix));
    *tensors = rest;
    hit.into_iter().map(|(n, t)| (n[prefix.len()..].to_string(), t)).collect()
}
