//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, JSON manifest,
//! then every tensor's data as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::adcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCMCKPT\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        offset,
        msg: msg.into(),
    }
}

pub fn to_bytes(params: &ParamSet) -> Result<Vec<u8>> {
    let manifest = Manifest {
        version: 1,
        tensors: params
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 16 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(16, format!("manifest length {mlen} exceeds file")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| format_err(16, format!("manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(format_err(16, format!("unsupported version {}", manifest.version)));
    }
    let mut off = body;
    let mut ps = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = off + 8 * n;
        if end > bytes.len() {
            return Err(format_err(off, format!("data for `{}` truncated", e.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ps.insert(e.name, Tensor::new(e.shape, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(format_err(off, "trailing bytes"));
    }
    Ok(ps)
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    std::fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    from_bytes(&std::fs::read(path)?)
}
