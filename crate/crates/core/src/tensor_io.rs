//! `UQT1` tensor container.
//!
//! Layout: the four magic bytes `UQT1`, a little-endian `u32` header length,
//! a UTF-8 JSON header `{"dtype", "shape", "role"}`, then the raw
//! little-endian row-major payload.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, Mask, Volume};

pub const MAGIC: &[u8; 4] = b"UQT1";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated tensor file")]
    Truncated,
    #[error("bad header: {0}")]
    Header(String),
    #[error("expected dtype {expected}, found {found}")]
    Dtype { expected: &'static str, found: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: Header,
    pub payload: Payload,
}

impl TensorFile {
    pub fn f32(shape: Vec<usize>, role: &str, data: Vec<f32>) -> Self {
        Self {
            header: Header {
                dtype: Dtype::F32,
                shape,
                role: role.to_string(),
            },
            payload: Payload::F32(data),
        }
    }

    pub fn u8(shape: Vec<usize>, role: &str, data: Vec<u8>) -> Self {
        Self {
            header: Header {
                dtype: Dtype::U8,
                shape,
                role: role.to_string(),
            },
            payload: Payload::U8(data),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    fn payload_len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len() * 4,
            Payload::U8(v) => v.len(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < 8 {
            return Err(TensorIoError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(TensorIoError::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or(TensorIoError::Truncated)?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| TensorIoError::Header(e.to_string()))?;
        let n: usize = header.shape.iter().product();
        let raw = &bytes[8 + hlen..];
        if raw.len() != n * header.dtype.width() {
            return Err(TensorIoError::Truncated);
        }
        let payload = match header.dtype {
            Dtype::F32 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(raw.to_vec()),
        };
        Ok(Self { header, payload })
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorIoError> {
        fs::write(path, self.encode()).map_err(|source| TensorIoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, TensorIoError> {
        let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>), TensorIoError> {
        match self.payload {
            Payload::F32(v) => Ok((self.header.shape, v)),
            Payload::U8(_) => Err(TensorIoError::Dtype {
                expected: "f32",
                found: self.header.dtype.name().into(),
            }),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>), TensorIoError> {
        match self.payload {
            Payload::U8(v) => Ok((self.header.shape, v)),
            Payload::F32(_) => Err(TensorIoError::Dtype {
                expected: "u8",
                found: self.header.dtype.name().into(),
            }),
        }
    }
}

pub fn write_volume(path: &Path, v: &Volume, role: &str) -> Result<(), TensorIoError> {
    TensorFile::f32(v.shape().to_vec(), role, v.data().to_vec()).write(path)
}

/// Reads a field; spacing is not stored in the container and defaults to 1.
pub fn read_volume(path: &Path) -> Result<Volume, TensorIoError> {
    let (shape, data) = TensorFile::read(path)?.into_f32()?;
    Ok(Volume::from_vec(shape, data)?)
}

pub fn write_mask(path: &Path, m: &Mask, role: &str) -> Result<(), TensorIoError> {
    TensorFile::u8(m.shape().to_vec(), role, m.data().to_vec()).write(path)
}

pub fn read_mask(path: &Path) -> Result<Mask, TensorIoError> {
    let (shape, data) = TensorFile::read(path)?.into_u8()?;
    Ok(Mask::new(shape, data)?)
}
