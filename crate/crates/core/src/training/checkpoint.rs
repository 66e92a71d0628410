//! Self-describing checkpoint container.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` header length, a JSON
//! header (config echo, step, array names and shapes), then every array as
//! row-major little-endian `f64`, in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNOWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    arrays: Vec<ArrayMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub arrays: Vec<(String, Tensor)>,
}

fn fail(path: &Path, version: u32, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        version,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.arrays.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
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

    /// `path` only labels errors.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail(path, 0, "not a checkpoint (bad magic bytes)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fail(
                path,
                version,
                format!("unsupported format version; this build reads version {FORMAT_VERSION}"),
            ));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(fail(path, version, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| fail(path, version, format!("invalid header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| fail(path, version, format!("invalid config echo: {e}")))?;
        let mut payload = &body[len..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for meta in header.arrays {
            let n: usize = meta.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(fail(
                    path,
                    version,
                    format!("truncated payload in array {}", meta.name),
                ));
            }
            let (chunk, rest) = payload.split_at(n * 8);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(meta.shape, data)
                .map_err(|e| fail(path, version, format!("array {}: {e}", meta.name)))?;
            arrays.push((meta.name, t));
        }
        if !payload.is_empty() {
            return Err(fail(
                path,
                version,
                format!("{} trailing bytes", payload.len()),
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Removes and returns the array called `name`.
    pub fn take(&mut self, path: &Path, name: &str) -> Result<Tensor> {
        let i = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| fail(path, FORMAT_VERSION, format!("missing array {name}")))?;
        Ok(self.arrays.remove(i).1)
    }
}
