//! `TVEC` tensor files.
//!
//! ```text
//! b"TVEC" | u8 version = 1 | u8 dtype (0 = f32) | u8 rank | rank × u64 LE extents | f32 LE payload, row-major
//! ```
//!
//! Tensors of any [`Scalar`] type are stored as `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TVEC";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&payload)
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

/// Reads one tensor; the reader is left positioned right after the payload.
pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(fmt)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TVEC".into()));
    }
    let [version, dtype, rank] = [head[4], head[5], head[6]];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported TVEC version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(fmt)?;
        let d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflows usize".into()))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let bytes = numel
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64).read_to_end(&mut payload).map_err(fmt)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "truncated payload: {} of {bytes} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor in {}",
            cursor.len(),
            path.display()
        )));
    }
    Ok(t)
}
