//! Container for named float32 tensors: an 8-byte little-endian header
//! length, a JSON header (format version, free-form metadata, tensor
//! manifest), then the tensors' little-endian `f32` data in manifest order.
//! Shared by head checkpoints and loaded feature-extractor weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const TENSOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor {name}: shape {shape:?} vs {} values", data.len())));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub meta: Map<String, Value>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: Map<String, Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    /// Tensor `name`, checked against an expected shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: TENSOR_FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("tensor file shorter than its header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| Error::Format("truncated tensor file header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("tensor file header: {e}")))?;
        if header.format_version != TENSOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor file version {} (expected {TENSOR_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let mut cursor = 8 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let end = cursor + 4 * count;
            let block = bytes
                .get(cursor..end)
                .ok_or_else(|| Error::Format(format!("truncated data for tensor {}", entry.name)))?;
            let data = block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in tensor file", bytes.len() - cursor)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}
