//! Binary checkpoint: `RSEP`, u32 version, u64 header length, JSON header
//! (config and tensor directory), then little-endian f32 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::CruseConfig;
use super::params::{tensor_layout, CruseParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSEP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: CruseConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &CruseParams) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for ((name, _), t) in tensor_layout(&params.config).into_iter().zip(params.tensors()) {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: params.config.clone(),
        tensors: entries,
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

fn take(bytes: &[u8], at: usize, len: usize) -> Result<&[u8]> {
    bytes.get(at..at + len).ok_or(Error::Truncated {
        expected: (at + len) as u64,
        found: bytes.len() as u64,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CruseParams> {
    if take(bytes, 0, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, 16, header_len)?)?;
    let data_start = 16 + header_len;

    let layout = tensor_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, configuration needs {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Shape(format!(
                "checkpoint entry {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = take(bytes, data_start + entry.offset as usize, 4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    CruseParams::from_tensors(header.config, tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &CruseParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CruseParams> {
    decode_checkpoint(&fs::read(path)?)
}
