// SPDX-License-Identifier: MIT OR Apache-2.0

//! `TTW1` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TTW1" | u64 header length | JSON header | tensor data | u32 CRC32
//! ```
//!
//! The JSON header is `{"config": <any>, "tensors": [{"name", "shape",
//! "dtype", "offset"}]}` where `offset` is relative to the start of the data
//! section. Weights are stored as `f32`; `f64` tensors are allowed for
//! records that need full precision. The CRC covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TTW1";

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

fn default_dtype() -> DType {
    DType::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    dtype: DType,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// A named tensor; values are held as `f64` in memory regardless of dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub config: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl TensorFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::mismatch(format!("tensor {}", t.name), n, t.data.len()));
            }
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype,
                offset,
            });
            offset += (n * t.dtype.width()) as u64;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: manifest,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 12 {
            return Err(corrupt(bytes.len(), "truncated before end of preamble".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt(0, "bad magic, expected TTW1".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                corrupt(
                    bytes.len(),
                    format!("truncated inside header (declared {header_len} bytes)"),
                )
            })?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| corrupt(12, format!("malformed header: {e}")))?;

        let mut data_len = 0usize;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset as usize != data_len {
                return Err(corrupt(
                    12,
                    format!(
                        "tensor {} offset {} breaks contiguity (expected {data_len})",
                        e.name, e.offset
                    ),
                ));
            }
            data_len += n * e.dtype.width();
        }
        let expected = header_end + data_len + 4;
        if bytes.len() < expected {
            return Err(corrupt(
                bytes.len(),
                format!("truncated: expected {expected} bytes, file has {}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(corrupt(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..expected - 4]);
        if stored != actual {
            return Err(corrupt(
                expected - 4,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }

        let data = &bytes[header_end..header_end + data_len];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let start = e.offset as usize;
                let raw = &data[start..start + n * e.dtype.width()];
                let values = match e.dtype {
                    DType::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                    DType::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                };
                TensorRecord {
                    name: e.name,
                    shape: e.shape,
                    dtype: e.dtype,
                    data: values,
                }
            })
            .collect();
        Ok(TensorFile {
            config: header.config,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
