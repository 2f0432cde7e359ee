//! `NDT1` tensor files: magic, dtype code, rank, little-endian `u32` dims,
//! then the raw little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NDT1";

/// A tensor of either precision, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert to the requested precision.
    pub fn into_dtype<E: Element>(self) -> Tensor<E> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * E::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(TensorError::Format(format!("truncated while reading {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let dtype_code = take(1, "dtype")?[0];
    let dtype = DType::from_code(dtype_code).ok_or_else(|| TensorError::Format(format!("unknown dtype code {dtype_code}")))?;
    let rank = take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = take(numel * dtype.size(), "payload")?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
    })
}

pub fn write_tensor<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
