//! Raw tensor container: magic `STLTNSR1`, u32 rank, u32 dims, then a
//! row-major little-endian f32 payload. f64 tensors are written as f32.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const TENSOR_MAGIC: &[u8; 8] = b"STLTNSR1";

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read one tensor container. `offset` tracks the absolute stream position
/// for error reporting and is advanced past the container on success.
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R, offset: &mut u64) -> Result<Tensor<S>> {
    let mut magic = [0u8; 8];
    read_exact_at(r, &mut magic, offset)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: *offset - 8,
            message: format!("bad tensor magic {magic:?}"),
        });
    }
    let rank = read_u32(r, offset)? as usize;
    if rank > 8 {
        return Err(Error::Format {
            offset: *offset - 4,
            message: format!("implausible tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, offset)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact_at(r, &mut buf, offset)?;
        data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(&shape, data)
}

fn read_u32<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset: *offset,
                message: "truncated file".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}
