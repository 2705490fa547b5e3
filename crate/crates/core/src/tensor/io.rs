//! `MDGT` tensor files: magic, version 0x01, dtype byte, ndim byte, `ndim`
//! little-endian u32 extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{DType, Element, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MDGT";
pub const VERSION: u8 = 0x01;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor format version {0}")]
    Version(u8),
    #[error("unknown dtype byte {0}")]
    UnknownDType(u8),
    #[error("stored dtype {stored:?} but {wanted:?} was requested")]
    DTypeMismatch { stored: DType, wanted: DType },
    #[error("truncated tensor data")]
    Truncated,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn encode<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.put_le(out);
    }
}

pub fn to_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode(t, &mut out);
    out
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize), FormatError> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or(FormatError::Truncated);
    let magic: [u8; 4] = take(0, 4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let head = take(4, 3)?;
    if head[0] != VERSION {
        return Err(FormatError::Version(head[0]));
    }
    let stored = DType::from_byte(head[1]).ok_or(FormatError::UnknownDType(head[1]))?;
    if stored != T::DTYPE {
        return Err(FormatError::DTypeMismatch { stored, wanted: T::DTYPE });
    }
    let ndim = head[2] as usize;
    let mut at = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize);
        at += 4;
    }
    let n: usize = dims.iter().product();
    let size = stored.size();
    let payload = take(at, n * size)?;
    let data = payload.chunks_exact(size).map(T::get_le).collect();
    Ok((Tensor::new(dims, data)?, at + n * size))
}

pub fn write_file<T: Element>(path: &Path, t: &Tensor<T>) -> Result<(), FormatError> {
    fs::write(path, to_bytes(t)).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn read_file<T: Element>(path: &Path) -> Result<Tensor<T>, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(FormatError::Truncated);
    }
    Ok(t)
}
