//! Model checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SAGCKPT1"              8-byte magic
//! u32 header_len           length of the JSON header in bytes
//! header_len bytes         UTF-8 JSON: {"format", "arch", "param_count", "sha256", "meta"}
//! u64 count                number of parameters
//! count * f64              flat parameter vector
//! ```
//!
//! `sha256` is the hex digest of the raw parameter bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SagError};

use super::{ArchConfig, Model, ModelParams};

pub const MAGIC: &[u8; 8] = b"SAGCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    arch: ArchConfig,
    param_count: u64,
    sha256: String,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub params: ModelParams,
    /// Free-form provenance (training config, seed).
    pub meta: serde_json::Value,
}

fn param_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = param_bytes(self.params.as_flat());
        let header = Header {
            format: FORMAT_VERSION,
            arch: self.arch.clone(),
            param_count: self.params.len() as u64,
            sha256: digest_hex(&body),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 4 + json.len() + 8 + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| SagError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(err("missing SAGCKPT1 magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize.checked_add(header_len).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        if header.format != FORMAT_VERSION {
            return Err(SagError::Checkpoint(format!("unsupported format {}", header.format)));
        }
        let count = u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[header_end + 8..];
        if count as u64 != header.param_count || body.len() != count * 8 {
            return Err(err("parameter count does not match payload"));
        }
        if digest_hex(body) != header.sha256 {
            return Err(err("checksum mismatch"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let model = Model::new(header.arch.clone())?;
        let params = ModelParams::from_flat(&model.layout, values)?;
        Ok(Self { arch: header.arch, params, meta: header.meta })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
