//! Flat tensor container used repo-wide.
//!
//! Layout: magic bytes `DTL1`, a little-endian `u32` rank, one little-endian
//! `u32` per dimension, then the values as little-endian `f64`, row-major.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sample::Sample;

const MAGIC: &[u8; 4] = b"DTL1";
const MAX_RANK: u32 = 32;

pub fn encode(sample: &Sample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * sample.shape().len() + 8 * sample.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(sample.shape().len() as u32).to_le_bytes());
    for &d in sample.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in sample.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Sample> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidSpec(format!(
            "bad tensor magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let rank = read_u32(&mut r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidSpec(format!("tensor rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != n * 8 {
        return Err(Error::InvalidSpec(format!(
            "tensor payload has {} bytes, shape {shape:?} needs {}",
            r.len(),
            n * 8
        )));
    }
    let mut values = Vec::with_capacity(n);
    let mut chunk = [0u8; 8];
    for _ in 0..n {
        read_exact(&mut r, &mut chunk)?;
        values.push(f64::from_le_bytes(chunk));
    }
    Sample::new(shape, values)
}

pub fn write_tensor(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let path = path.as_ref();
    crate::manifest::atomic_write(path, &encode(sample))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::InvalidSpec("tensor file truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// CSV number formatting shared by the schedule/loss/matrix exports: one
/// choice (17 significant digits) so identical data is byte-identical.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
