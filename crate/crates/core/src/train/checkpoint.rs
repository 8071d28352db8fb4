//! Checkpoint container.
//!
//! Layout: 4-byte magic `GCKP`, u32 LE format version, u64 LE header length,
//! the JSON header, then every parameter group as little-endian f64 in header
//! order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamGroup, ToyBackbone};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShape {
    pub model_id: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_ids: Vec<String>,
    pub groups: Vec<GroupShape>,
    pub config_hash: String,
}

pub fn write_checkpoint(path: impl AsRef<Path>, ensemble: &[ToyBackbone], config_hash: &str) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        model_ids: ensemble.iter().map(|b| b.model_id.clone()).collect(),
        groups: ensemble
            .iter()
            .flat_map(|b| {
                b.groups.iter().map(|g| GroupShape {
                    model_id: b.model_id.clone(),
                    name: g.name.clone(),
                    rows: g.rows,
                    cols: g.cols,
                    frozen: g.frozen,
                })
            })
            .collect(),
        config_hash: config_hash.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for g in ensemble.iter().flat_map(|b| &b.groups) {
        for v in &g.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Vec<ToyBackbone>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.to_string(),
    };
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body_start])?;
    let mut values = bytes[body_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = header.groups.iter().map(|g| g.rows * g.cols).sum();
    if (bytes.len() - body_start) != expected * 8 {
        return Err(bad("parameter block length does not match header"));
    }
    let mut ensemble: Vec<ToyBackbone> = header
        .model_ids
        .iter()
        .map(|id| ToyBackbone {
            model_id: id.clone(),
            groups: Vec::new(),
        })
        .collect();
    for g in &header.groups {
        let owner = ensemble
            .iter_mut()
            .find(|b| b.model_id == g.model_id)
            .ok_or_else(|| bad("group refers to unknown model"))?;
        owner.groups.push(ParamGroup {
            name: g.name.clone(),
            rows: g.rows,
            cols: g.cols,
            frozen: g.frozen,
            values: values.by_ref().take(g.rows * g.cols).collect(),
        });
    }
    Ok((header, ensemble))
}
