//! Binary tensor serialization (the "VCAP" container used by checkpoints).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VCAP"  u32 version=1  u8 dtype(0 = f32)  u8 rank  rank × u32 extents  payload
//! ```
//!
//! The payload is the row-major `f32` buffer. Writing then reading yields a
//! byte-identical stream, which the checkpoint roundtrip tests rely on.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Tensor, TensorError};

pub const VCAP_MAGIC: &[u8; 4] = b"VCAP";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("tensor I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor magic {found:?}, expected \"VCAP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("rank {0} exceeds the format limit of 255")]
    RankTooLarge(usize),
    #[error("invalid extents {0:?}")]
    BadExtents(Vec<u32>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn write_tensor_f32<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<(), TensorIoError> {
    w.write_all(VCAP_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    let rank = t.rank();
    let rank_byte: u8 = rank
        .try_into()
        .map_err(|_| TensorIoError::RankTooLarge(rank))?;
    w.write_all(&[rank_byte])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_f32<R: Read>(r: &mut R) -> Result<Tensor<f32>, TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VCAP_MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    if tags[0] != DTYPE_F32 {
        return Err(TensorIoError::UnsupportedDtype(tags[0]));
    }
    let rank = tags[1] as usize;
    let mut extents = Vec::with_capacity(rank);
    for _ in 0..rank {
        extents.push(read_u32(r)?);
    }
    if extents.is_empty() || extents.iter().any(|&e| e == 0) {
        return Err(TensorIoError::BadExtents(extents));
    }
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e as usize))
        .ok_or_else(|| TensorIoError::BadExtents(extents.clone()))?;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    let shape = extents.into_iter().map(|e| e as usize).collect();
    Ok(Tensor::new(shape, data)?)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorIoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
