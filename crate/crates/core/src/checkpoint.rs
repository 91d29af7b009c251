//! `HNCK` checkpoints: named tensors in a flat little-endian container.
//!
//! ```text
//! "HNCK" | version: u16 | records until EOF:
//!   name_len: u16 | name: UTF-8 | rank: u8 | dims: u32 × rank | payload: f32 × Π dims
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{put_f32s, read_file, write_atomic, Reader};
use crate::networks::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type Record = (String, Tensor);

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode(bytes: &[u8], what: &str) -> Result<Vec<Record>> {
    let mut r = Reader::new(bytes, what);
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: what.into(),
            expected: "HNCK",
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let mut records = Vec::new();
    while !r.at_end() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("{what}: record name is not UTF-8")))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: u64 = dims.iter().map(|&d| d as u64).product();
        r.require(n * 4)?;
        let data = r.f32s(n as usize)?;
        let t = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(dims, data)?
        };
        records.push((name, t));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    write_atomic(path, &encode(records))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    decode(&read_file(path)?, &path.display().to_string())
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_records(path, &model.to_records())
}

/// Overwrites `model`'s parameters from a checkpoint with matching layout.
pub fn load_into(path: &Path, model: &mut Model) -> Result<()> {
    model.load_records(&read_records(path)?)
}
