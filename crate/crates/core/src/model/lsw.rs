//! LSW1 weight files.
//!
//! Layout: `"LSW1"`, u32 LE header length, UTF-8 JSON header, the parameter
//! blobs as contiguous little-endian f32 in header order, then a u32 LE
//! CRC32 of every preceding byte. Tensor offsets in the header are relative
//! to the first blob byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, WeightStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LSW_MAGIC: &[u8; 4] = b"LSW1";
pub const LSW_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

pub fn weights_to_bytes(g: &ModelGraph<f32>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = g
        .weights()
        .iter()
        .map(|(name, t)| {
            let length = 4 * t.len() as u64;
            let rec = TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            rec
        })
        .collect();
    let header = Header {
        version: LSW_VERSION,
        input_shape: g.input_shape(),
        layers: g.layers().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("header longer than 4 GiB".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(LSW_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in g.weights().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelGraph<f32>> {
    if bytes.len() < 4 || &bytes[..4] != LSW_MAGIC {
        return Err(Error::Format("bad magic bytes (not an LSW1 file)".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated file".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if 8 + header_len > body.len() {
        return Err(Error::Format("truncated file (header runs past the end)".into()));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.version != LSW_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {LSW_VERSION})",
            header.version
        )));
    }
    let blobs = &body[8 + header_len..];
    let mut expected_offset = 0u64;
    let mut weights = WeightStore::new();
    for rec in header.tensors {
        let numel: usize = rec.shape.iter().product();
        if rec.offset != expected_offset || rec.length != 4 * numel as u64 {
            return Err(Error::Format(format!(
                "tensor '{}' record (offset {}, length {}) does not match the blob layout",
                rec.name, rec.offset, rec.length
            )));
        }
        let end = (rec.offset + rec.length) as usize;
        if end > blobs.len() {
            return Err(Error::Format(format!("truncated file (tensor '{}')", rec.name)));
        }
        let data = blobs[rec.offset as usize..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.push(rec.name, Tensor::new(rec.shape, data)?);
        expected_offset = end as u64;
    }
    if expected_offset as usize != blobs.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            blobs.len() - expected_offset as usize
        )));
    }
    ModelGraph::from_parts(header.input_shape, header.layers, weights)
}

pub fn save_weights(g: &ModelGraph<f32>, path: &Path) -> Result<()> {
    fs::write(path, weights_to_bytes(g)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelGraph<f32>> {
    weights_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
