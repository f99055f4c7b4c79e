//! Tensor archive container shared by checkpoints, dataset archives and
//! synthesized image sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CITENSOR"
//! version    u32       container version
//! header_len u64       length of the JSON header in bytes
//! header     JSON      kind, dtype, free-form metadata, tensor table
//! blobs      ...       raw tensors, back to back, in table order
//! ```
//!
//! Every tensor table entry carries its shape, byte offset (relative to the
//! start of the blob section), byte length and SHA-256 digest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CITENSOR";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: DType,
    meta: serde_json::Value,
    tensors: Vec<BlobEntry>,
}

/// An in-memory archive: a kind tag, free-form JSON metadata and named tensors.
#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: String,
    pub dtype: DType,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, dtype: DType, meta: serde_json::Value) -> Self {
        Archive {
            kind: kind.into(),
            dtype,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("archive has no tensor named `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = self.dtype.width();
        let mut blobs = Vec::new();
        let mut table = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let start = blobs.len();
            blobs.reserve(t.data.len() * width);
            match self.dtype {
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|&v| blobs.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t
                    .data
                    .iter()
                    .for_each(|&v| blobs.extend_from_slice(&v.to_le_bytes())),
            }
            let blob = &blobs[start..];
            table.push(BlobEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: start as u64,
                byte_len: blob.len() as u64,
                sha256: sha256_hex(blob),
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            dtype: self.dtype,
            meta: self.meta.clone(),
            tensors: table,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Format("file shorter than archive preamble".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Incompatible(format!(
                "container version {version}, expected {CONTAINER_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..blob_start])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let blobs = &bytes[blob_start..];
        let width = header.dtype.width();

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let lo = entry.offset as usize;
            let hi = lo
                .checked_add(entry.byte_len as usize)
                .filter(|&hi| hi <= blobs.len())
                .ok_or_else(|| Error::Format(format!("blob `{}` is truncated", entry.name)))?;
            let blob = &blobs[lo..hi];
            if sha256_hex(blob) != entry.sha256 {
                return Err(Error::Format(format!("checksum mismatch on `{}`", entry.name)));
            }
            let count: usize = entry.shape.iter().product();
            if count * width != blob.len() {
                return Err(Error::Format(format!(
                    "blob `{}` length {} does not match shape {:?}",
                    entry.name,
                    blob.len(),
                    entry.shape
                )));
            }
            let data = match header.dtype {
                DType::F32 => blob
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => blob
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push(Tensor::new(entry.name.clone(), entry.shape.clone(), data));
        }
        Ok(Archive {
            kind: header.kind,
            dtype: header.dtype,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
