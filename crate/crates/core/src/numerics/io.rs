//! Binary tensor encoding.
//!
//! Layout: magic `BTNT`, version byte (1), rank byte, one little-endian
//! `u32` per extent, then every element as a little-endian `f64`.

use super::Tensor;
use crate::error::{BtnError, Result};
use crate::scalar::Scalar;
use std::io::{ErrorKind, Read, Write};

pub const TENSOR_MAGIC: [u8; 4] = *b"BTNT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| BtnError::InvalidShape {
        shape: t.shape().to_vec(),
        reason: "rank exceeds 255".into(),
    })?;
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| BtnError::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "extent exceeds u32".into(),
        })?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => BtnError::Truncated(what),
        _ => BtnError::Stream(e),
    })
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "tensor header")?;
    if magic != TENSOR_MAGIC {
        return Err(BtnError::MagicMismatch {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    let mut vr = [0u8; 2];
    read_exact_or(r, &mut vr, "tensor header")?;
    if vr[0] != TENSOR_VERSION {
        return Err(BtnError::VersionMismatch {
            expected: TENSOR_VERSION as u32,
            found: vr[0] as u32,
        });
    }
    let rank = vr[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        read_exact_or(r, &mut e, "tensor extents")?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    read_exact_or(r, &mut raw, "tensor data")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cursor = bytes;
    read_tensor(&mut cursor)
}
