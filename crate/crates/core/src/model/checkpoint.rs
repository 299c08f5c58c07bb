//! Checkpoint container.
//!
//! Layout: `b"SSCN"`, format version (`u32` LE), header length in bytes
//! (`u64` LE), UTF-8 JSON header, then every tensor as little-endian `f32`
//! in manifest order. Manifest offsets are relative to the payload start.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelParams};
use crate::compute::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    input_scale: f64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in params.names().into_iter().zip(params.tensors()) {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        arch: params.arch.clone(),
        input_scale: params.input_scale,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing SSCN magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];

    let names = ModelParams::<f32>::expected_shapes(&header.arch);
    if header.tensors.len() != names.len() {
        return Err(bad("tensor count does not match architecture"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(bad(&format!("tensor `{}` runs past end of payload", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
    }
    let params = ModelParams::from_tensors(header.arch, header.input_scale, tensors)?;
    for (want, e) in params.names().iter().zip(&header.tensors) {
        if *want != e.name {
            return Err(bad(&format!("expected tensor `{want}`, found `{}`", e.name)));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let bytes = write_checkpoint(params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
