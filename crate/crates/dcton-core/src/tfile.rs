//! Binary tensor files: magic `DCTN`, dtype code, rank, little-endian
//! shape and row-major payload. Used for descriptors and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DCTN";

/// Serialize a tensor to `path`, overwriting any existing file.
pub fn write_tensor<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.len() * T::BYTE_WIDTH);
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.to_le_bytes(&mut buf);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a tensor of element type `T`; errors on bad magic, unknown dtype,
/// dtype mismatch, truncation or trailing bytes.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    if !path.exists() {
        return Err(Error::NotFound { path: path.into() });
    }
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    parse_tensor(path, &buf)
}

fn parse_tensor<T: Scalar>(path: &Path, buf: &[u8]) -> Result<Tensor<T>> {
    if buf.len() < 6 {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected DCTN)"));
    }
    let dtype = Dtype::from_code(buf[4])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", buf[4])))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("dtype mismatch: file holds {:?}, caller wants {:?}", dtype, T::DTYPE),
        ));
    }
    let rank = buf[5] as usize;
    let header = 6 + rank * 4;
    if buf.len() < header {
        return Err(Error::format(path, "truncated shape"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&buf[6 + i * 4..10 + i * 4]);
        shape.push(u32::from_le_bytes(raw) as usize);
    }
    let count: usize = shape.iter().product();
    let expected = header + count * T::BYTE_WIDTH;
    if buf.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: need {expected} bytes, have {}", buf.len()),
        ));
    }
    if buf.len() > expected {
        return Err(Error::format(
            path,
            format!("trailing bytes: expected {expected}, have {}", buf.len()),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = header + i * T::BYTE_WIDTH;
        data.push(T::from_le_bytes(&buf[at..at + T::BYTE_WIDTH]));
    }
    Ok(Tensor::from_vec(&shape, data))
}
