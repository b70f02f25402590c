//! `ZVT1TENS` raw tensor files.
//!
//! Layout: 8-byte magic `ZVT1TENS`, little-endian `u32` rank, `rank` little-endian
//! `u64` dimensions, then the row-major `f64` payload in little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"ZVT1TENS";

/// Ranks above this are rejected on decode; nothing in the crate uses more than five.
pub const MAX_RANK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic, expected ZVT1TENS")]
    BadMagic,
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("rank {0} exceeds limit")]
    RankTooLarge(u32),
    #[error("zero-sized dimension at axis {0}")]
    ZeroDim(usize),
    #[error("element count overflows")]
    Overflow,
    #[error("payload has {found} bytes, shape needs {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, DecodeError> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(if bytes.len() < 8 {
        DecodeError::Truncated("magic")
    } else {
        DecodeError::BadMagic
    })?;
    let (rank_bytes, mut rest) = split(rest, 4, "rank")?;
    let rank = u32::from_le_bytes(rank_bytes.try_into().unwrap());
    if rank as usize > MAX_RANK {
        return Err(DecodeError::RankTooLarge(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for axis in 0..rank as usize {
        let (dim_bytes, tail) = split(rest, 8, "dimensions")?;
        rest = tail;
        let dim = u64::from_le_bytes(dim_bytes.try_into().unwrap());
        if dim == 0 {
            return Err(DecodeError::ZeroDim(axis));
        }
        let dim = usize::try_from(dim).map_err(|_| DecodeError::Overflow)?;
        count = count.checked_mul(dim).ok_or(DecodeError::Overflow)?;
        shape.push(dim);
    }
    let expected = count.checked_mul(8).ok_or(DecodeError::Overflow)?;
    if rest.len() != expected {
        return Err(DecodeError::PayloadLength {
            expected,
            found: rest.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in rest.chunks_exact(8).enumerate() {
        let x = f64::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(DecodeError::NonFinite(i));
        }
        data.push(x);
    }
    Ok(Tensor::from_parts(shape, data))
}

fn split<'a>(bytes: &'a [u8], n: usize, what: &'static str) -> std::result::Result<(&'a [u8], &'a [u8]), DecodeError> {
    if bytes.len() < n {
        Err(DecodeError::Truncated(what))
    } else {
        Ok(bytes.split_at(n))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path, None, e.to_string()))
}
