//! Parameter checkpoints.
//!
//! Layout: the magic bytes `T4P1`, a little-endian `u32` header length, a
//! JSON array of `{name, shape, dtype: "f32"}` records, then each record's
//! values as little-endian `f32`, concatenated in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"T4P1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let records: Vec<Record> = store
        .ids()
        .map(|id| Record {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            dtype: "f32".into(),
        })
        .collect();
    let header = serde_json::to_vec(&records)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::invalid("checkpoint", "header larger than 4 GiB"))?;
    let mut out = Vec::with_capacity(8 + header.len() + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for id in store.ids() {
        for &v in store.get(id).data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "truncated checkpoint preamble".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected T4P1".into(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = 8 + header_len;
    if bytes.len() < body {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("header declares {header_len} bytes but file ends early"),
        });
    }
    let records: Vec<Record> = serde_json::from_slice(&bytes[8..body]).map_err(|e| Error::Format {
        offset: 8,
        msg: format!("header json: {e}"),
    })?;
    let mut store = ParamStore::new();
    let mut cursor = body;
    for r in records {
        if r.dtype != "f32" {
            return Err(Error::Format {
                offset: cursor,
                msg: format!("unsupported dtype {} for {}", r.dtype, r.name),
            });
        }
        let n: usize = r.shape.iter().product();
        let end = cursor + n * 4;
        if bytes.len() < end {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("payload for {} truncated", r.name),
            });
        }
        let data = bytes[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(r.shape, data).map_err(|e| Error::Format {
            offset: cursor,
            msg: e.to_string(),
        })?;
        store.add(r.name, t);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::Format {
            offset: cursor,
            msg: "trailing bytes after last record".into(),
        });
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
