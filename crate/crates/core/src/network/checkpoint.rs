//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"MTLCKPT1"
//! hdr_len    u64 LE    length of the JSON header in bytes
//! header     hdr_len   UTF-8 JSON (see `Header`)
//! payload    ...       little-endian f64 values, tensors back to back
//! ```
//!
//! Each header tensor entry gives its name, shape, and byte offset into the
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, MultiStreamModel, NamedParam};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTLCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    model: ModelConfig,
    /// Free-form configuration echo (the experiment config that produced
    /// the weights).
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: MultiStreamModel,
    pub config: serde_json::Value,
}

pub fn save_checkpoint(
    model: &MultiStreamModel,
    config_echo: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel() * 8;
            e
        })
        .collect();
    let header = Header {
        format: "mtl-checkpoint".into(),
        version: 1,
        dtype: "f64".into(),
        endianness: "little".into(),
        model: model.config().clone(),
        config: config_echo.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(hdr_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    if header.dtype != "f64" || header.endianness != "little" {
        return Err(bad("unsupported dtype or endianness"));
    }
    let payload = &bytes[payload_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * 8;
        if end > payload.len() {
            return Err(bad(&format!("tensor `{}` runs past end of file", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push(NamedParam {
            name: e.name,
            value: Tensor::new(e.shape, data)?,
        });
    }
    let mut model = build_model(header.model)?;
    model.load_params(&named)?;
    Ok(Checkpoint {
        model,
        config: header.config,
    })
}
