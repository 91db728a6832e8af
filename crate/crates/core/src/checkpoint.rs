//! Binary model checkpoints.
//!
//! Layout (all little-endian): 8-byte magic, `u32` version, `u64` n, m, r,
//! then `U` as an r×n row-major block followed by `V` as r×m, each entry an
//! `f64`. A JSON sidecar next to the checkpoint holds the training config
//! and per-epoch history.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::FactorModel;
use crate::trainer::{EpochRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"SQLRANK\0";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 3 * 8;

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// `model.bin` → `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

// Column-contiguous storage holds entry (row a, column c) at c*r + a.
fn push_row_major(out: &mut Vec<u8>, cols: &[f64], rank: usize) {
    let count = cols.len() / rank.max(1);
    for a in 0..rank {
        for c in 0..count {
            out.extend_from_slice(&cols[c * rank + a].to_le_bytes());
        }
    }
}

pub fn encode(model: &FactorModel) -> Vec<u8> {
    let (r, n, m) = (model.rank(), model.n(), model.m());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * r * (n + m));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [n, m, r] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    push_row_major(&mut out, model.user_factors(), r);
    push_row_major(&mut out, model.item_factors(), r);
    out
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

fn read_block(bytes: &[u8], rank: usize, count: usize) -> Vec<f64> {
    let mut cols = vec![0.0; rank * count];
    for a in 0..rank {
        for c in 0..count {
            let at = 8 * (a * count + c);
            cols[c * rank + a] = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        }
    }
    cols
}

pub fn decode(bytes: &[u8]) -> Result<FactorModel> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| usize::try_from(read_u64(bytes, 12 + 8 * i)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("dimensions overflow".into()))?;
    let (n, m, r) = (dims[0], dims[1], dims[2]);
    let expected = r
        .checked_mul(n.checked_add(m).ok_or_else(|| Error::Checkpoint("dimensions overflow".into()))?)
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Checkpoint("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for n={n}, m={m}, r={r}, found {}",
            bytes.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let u = read_block(body, r, n);
    let v = read_block(&body[8 * r * n..], r, m);
    FactorModel::from_columns(r, n, m, u, v).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_model(path: &Path, model: &FactorModel) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<FactorModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
