//! Binary tensor serialization.
//!
//! A tensor is `"RFT1"`, the rank as a little-endian `u64`, each extent as a
//! little-endian `u64`, then the elements as little-endian `f32`. A named
//! tensor table is a `u64` entry count followed by, per entry, a `u32` name
//! length, the UTF-8 name, and the tensor. A standalone table file starts
//! with `"RFTB"`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"RFT1";
pub const TABLE_MAGIC: &[u8; 4] = b"RFTB";

const MAX_RANK: u64 = 16;
const MAX_ELEMENTS: u64 = 1 << 32;
const MAX_NAME: u32 = 4096;

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| TensorError::Format("tensor too large".into()))?;
        shape.push(d as usize);
    }
    let mut bytes = vec![0u8; 4 * count as usize];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_table<T: Real, W: Write>(w: &mut W, entries: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_table<T: Real, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let count = read_u64(r)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)?;
        if len > MAX_NAME {
            return Err(TensorError::Format(format!("tensor name length {len} too long")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let t = read_tensor(r)?;
        entries.push((name, t));
    }
    Ok(entries)
}

/// Writes a standalone named-tensor file.
pub fn save_table<T: Real>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TABLE_MAGIC)?;
    write_table(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_table<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(TensorError::Format(format!("bad table magic {magic:?}")));
    }
    read_table(&mut r)
}
