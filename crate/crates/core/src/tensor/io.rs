//! `CSGT` tensor file format.
//!
//! ```text
//! magic   "CSGT"          4 bytes
//! version u8 = 1
//! dtype   u8              0=f32 1=f64 2=u8 3=i32 4=i64
//! ndim    u8
//! pad     u8 = 0
//! extents u64 LE x ndim
//! payload row-major, little-endian, count x width bytes
//! ```

use std::fs;
use std::path::Path;

use super::{AnyTensor, DType, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"CSGT";
pub const TENSOR_VERSION: u8 = 1;

const HEADER_LEN: usize = 8;

/// Appends the encoded tensor to `out`.
pub fn encode_tensor(t: &AnyTensor, out: &mut Vec<u8>) {
    let shape = t.shape();
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.dtype().code());
    out.push(u8::try_from(shape.len()).expect("ndim fits in u8"));
    out.push(0);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    t.write_payload(out);
}

pub(crate) fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(*pos);
    if available < n {
        return Err(Error::Truncated {
            needed: n,
            available,
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_typed<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let width = T::DTYPE.width();
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut pos = 0;
    let header = take(bytes, &mut pos, HEADER_LEN)?;
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    if header[4] != TENSOR_VERSION {
        return Err(Error::VersionMismatch {
            expected: TENSOR_VERSION,
            found: header[4],
        });
    }
    let dtype = DType::from_code(header[5])
        .ok_or_else(|| Error::Malformed(format!("unknown dtype code {}", header[5])))?;
    let ndim = header[6] as usize;

    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        let extent = usize::try_from(raw)
            .ok()
            .filter(|&e| e > 0)
            .ok_or_else(|| Error::Malformed(format!("invalid extent {raw}")))?;
        shape.push(extent);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|c| c.checked_mul(dtype.width()))
        .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    let payload = take(bytes, &mut pos, count)?;

    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(read_typed(shape, payload)?),
        DType::F64 => AnyTensor::F64(read_typed(shape, payload)?),
        DType::U8 => AnyTensor::U8(read_typed(shape, payload)?),
        DType::I32 => AnyTensor::I32(read_typed(shape, payload)?),
        DType::I64 => AnyTensor::I64(read_typed(shape, payload)?),
    };
    Ok((tensor, pos))
}

pub fn save_tensor(t: &AnyTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * t.shape().len() + t.payload_bytes());
    encode_tensor(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a tensor file; trailing bytes after the payload are rejected.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}
