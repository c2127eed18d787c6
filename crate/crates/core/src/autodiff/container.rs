//! Versioned binary container for model parameters and array dumps.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, a UTF-8
//! JSON header (kind, free-form metadata and the array directory), then every
//! array as little-endian `f64` in directory order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XVAMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("container holds kind `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("truncated array data")]
    Truncated,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.arrays.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(ContainerError::Truncated);
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| ContainerError::Header(e.to_string()))?;
        let mut pos = hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n = e.shape[0] * e.shape[1];
            let end = pos + 8 * n;
            if end > body.len() {
                return Err(ContainerError::Truncated);
            }
            let data = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((
                e.name,
                Tensor::new(e.shape, data).map_err(|err| ContainerError::Header(err.to_string()))?,
            ));
            pos = end;
        }
        if pos != body.len() {
            return Err(ContainerError::Header("trailing bytes after arrays".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }
}
