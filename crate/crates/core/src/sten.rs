//! STEN1 tensor files: `"STEN1"`, u8 dtype tag (0 = f32, 1 = f64), u8 rank,
//! `rank` little-endian u32 dims, then the raw little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 5] = b"STEN1";

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.bytes() as usize);
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Reads the dtype tag without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 7 || &bytes[..5] != MAGIC {
        return Err(Error::Format("missing STEN1 magic".into()));
    }
    DType::from_tag(bytes[5]).ok_or_else(|| Error::Format(format!("bad dtype tag {}", bytes[5])))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE,
            found: dtype,
        });
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let width = dtype.size_of();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * width {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * width
        )));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(&shape, data)
}

pub fn write<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(t))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn read<T: Element>(path: &Path) -> Result<Tensor<T>> {
    decode(&read_bytes(path)?)
}
