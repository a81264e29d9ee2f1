//! Versioned binary container of named `f64` arrays.
//!
//! Layout (little endian): magic `MDTR`, `u32` format version, `u32` array
//! count, then per array a `u32` name length, the UTF-8 name, a `u64` value
//! count and the values.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MDTR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("array name is not UTF-8")]
    Name,
    #[error("missing array {0}")]
    Missing(String),
    #[error("array {name} has {found} values, expected {expected}")]
    Length { name: String, expected: usize, found: usize },
}

pub type Arrays = Vec<(String, Vec<f64>)>;

pub fn encode(arrays: &[(String, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, values) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Arrays, CheckpointError> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        let s = bytes.get(pos..pos + n).ok_or(CheckpointError::Truncated)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32_at(take(4)?) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| CheckpointError::Name)?.to_string();
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.push((name, values));
    }
    Ok(arrays)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, arrays: &[(String, Vec<f64>)]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(arrays))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Arrays, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Looks up an array by name.
pub fn find<'a>(arrays: &'a [(String, Vec<f64>)], name: &str) -> Result<&'a [f64], CheckpointError> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v.as_slice())
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}
