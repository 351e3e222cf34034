//! Binary checkpoint format.
//!
//! ```text
//! "JTS1" | u32 version | u64 header length | header JSON
//!        | records { u32 name length | name | u8 dtype | u32 rank | u64 dims.. | data }
//! ```
//!
//! All integers and floats are little-endian. Weights are written as f64
//! (dtype tag 1) so that a round trip is bit-exact; readers also accept f32
//! (tag 0).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AdamWState;
use crate::model::{ModelConfig, ModelError, ModelWeights};
use crate::numcore::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JTS1";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub weights: ModelWeights,
    pub optimizer: Option<AdamWState>,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    seed: u64,
    adam_step: Option<u64>,
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let header = serde_json::to_vec(&Header {
        model: ckpt.model.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
        adam_step: ckpt.optimizer.as_ref().map(|s| s.step),
    })?;
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(&header);
    for (name, t) in ckpt.weights.named() {
        write_record(&mut out, &name, t);
    }
    if let Some(state) = &ckpt.optimizer {
        for (prefix, w) in [("adam.m.", &state.m), ("adam.v.", &state.v)] {
            for (name, t) in w.named() {
                write_record(&mut out, &format!("{prefix}{name}"), t);
            }
        }
    }
    Ok(out)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Length prefix checked against the bytes left, so a corrupt length reports
/// truncation instead of attempting a huge allocation.
fn read_len(r: &mut &[u8], raw: u64, unit: u64) -> Result<usize, CheckpointError> {
    match raw.checked_mul(unit) {
        Some(n) if n <= r.len() as u64 => Ok(n as usize),
        _ => Err(CheckpointError::Truncated),
    }
}

fn read_record(r: &mut &[u8]) -> Result<(String, Tensor), CheckpointError> {
    let name_len = read_u32(r)? as u64;
    let name_len = read_len(r, name_len, 1)?;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let rank = read_u32(r)?;
    let mut shape = Vec::with_capacity(rank.min(8) as usize);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or(CheckpointError::Truncated)?;
    let data = match tag[0] {
        DTYPE_F64 => {
            let n = read_len(r, numel, 8)?;
            let (bytes, rest) = r.split_at(n);
            *r = rest;
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        }
        DTYPE_F32 => {
            let n = read_len(r, numel, 4)?;
            let (bytes, rest) = r.split_at(n);
            *r = rest;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        }
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown dtype tag {other} in `{name}`"
            )))
        }
    };
    Ok((name, Tensor::new(shape, data)?))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = read_u64(&mut r)?;
    let header_len = read_len(&mut r, header_len, 1)?;
    let header: Header = serde_json::from_slice(&r[..header_len])?;
    r = &r[header_len..];

    let mut records = BTreeMap::new();
    while !r.is_empty() {
        let (name, t) = read_record(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!(
                "duplicate record `{name}`"
            )));
        }
    }
    let mut split = |prefix: &str| -> Vec<(String, Tensor)> {
        let keys: Vec<String> = records
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let t = records.remove(&k).expect("key listed");
                (k[prefix.len()..].to_string(), t)
            })
            .collect()
    };
    let m = split("adam.m.");
    let v = split("adam.v.");
    let weights = ModelWeights::from_named(&header.model, split(""))?;
    let optimizer = match header.adam_step {
        Some(step) => Some(AdamWState {
            step,
            m: ModelWeights::from_named(&header.model, m)?,
            v: ModelWeights::from_named(&header.model, v)?,
        }),
        None if m.is_empty() && v.is_empty() => None,
        None => {
            return Err(CheckpointError::Malformed(
                "optimizer records without optimizer step".into(),
            ))
        }
    };
    Ok(Checkpoint {
        model: header.model,
        weights,
        optimizer,
        step: header.step,
        seed: header.seed,
    })
}

pub fn checkpoint_save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = write_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path).map_err(CheckpointError::Io)?;
    f.write_all(&bytes).map_err(CheckpointError::Io)?;
    f.flush().map_err(CheckpointError::Io)?;
    Ok(())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(CheckpointError::Io)?;
    read_checkpoint(&bytes)
}
