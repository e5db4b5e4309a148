//! Checkpoint file format.
//!
//! 16-byte header, little-endian throughout:
//!
//! ```text
//! offset 0   magic  "FSHD"        (4 bytes)
//! offset 4   version u16          (currently 1)
//! offset 6   reserved, zero       (2 bytes)
//! offset 8   d       u64          (parameter count)
//! offset 16  d little-endian f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::ParameterVector;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSHD";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("truncated checkpoint: header says {expected} values, file holds {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub fn write_checkpoint(path: &Path, params: &ParameterVector) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(16 + params.dim() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&[0u8; 2]);
    buf.extend_from_slice(&(params.dim() as u64).to_le_bytes());
    for &x in &params.0 {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterVector, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let got = (bytes.len() as u64 - 16) / 4;
    if got < d {
        return Err(CheckpointError::Truncated { expected: d, got });
    }
    let mut values = Vec::with_capacity(d as usize);
    for i in 0..d as usize {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(CheckpointError::NonFinite(i));
        }
        values.push(v);
    }
    Ok(ParameterVector(values))
}
