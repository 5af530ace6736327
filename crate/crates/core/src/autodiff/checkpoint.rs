//! One JSON manifest line followed by the raw little-endian buffers of every
//! tensor in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: Vec<NamedTensor<T>>,
    pub step: u64,
    pub optimizer_state: bool,
    /// Free-form metadata, e.g. the model configuration.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    step: u64,
    optimizer_state: bool,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let manifest = Manifest {
        dtype: T::DTYPE.to_string(),
        step: ckpt.step,
        optimizer_state: ckpt.optimizer_state,
        tensors: ckpt
            .tensors
            .iter()
            .map(|t| Entry {
                name: t.name.clone(),
                shape: t.tensor.shape.clone(),
            })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    let line = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(line.len() + 1);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    for t in &ckpt.tensors {
        for &v in &t.tensor.data {
            v.write_le(&mut bytes);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: stored as {}, requested {}",
            path.display(),
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let expected: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * T::BYTES;
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: expected {expected} data bytes, found {}",
            path.display(),
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(T::BYTES);
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data = chunks.by_ref().take(n).map(T::read_le).collect();
            NamedTensor {
                name: e.name,
                tensor: Tensor { shape: e.shape, data },
            }
        })
        .collect();
    Ok(Checkpoint {
        tensors,
        step: manifest.step,
        optimizer_state: manifest.optimizer_state,
        meta: manifest.meta,
    })
}
