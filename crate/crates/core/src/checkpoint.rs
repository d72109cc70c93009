//! `CSGC` checkpoint container: an ordered list of uniquely named tensors,
//! each stored dense-float, affine-quantized or sparse.
//!
//! ```text
//! magic "CSGC" | version u8 = 1 | entry count u32 LE
//! per entry:
//!   name length u16 LE | name UTF-8 | flag u8
//!   flag 0 (float):     CSGT tensor blob
//!   flag 1 (quantized): scale f32 LE | zero_point i32 LE | CSGT blob (uint8)
//!   flag 2 (sparse):    ndim u8 | extents u64 LE x ndim | count u64 LE
//!                       | (index u32 LE, value f32 LE) x count, ascending index
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prune::SparseTensor;
use crate::quant::{QuantParams, QuantizedTensor};
use crate::tensor::io::take;
use crate::tensor::{decode_tensor, encode_tensor, AnyTensor, DType};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSGC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Bytes of quantization metadata per quantized entry (scale + zero point).
pub const QUANT_META_BYTES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryValue {
    Float(AnyTensor),
    Quantized(QuantizedTensor),
    Sparse(SparseTensor),
}

impl EntryValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            EntryValue::Float(t) => t.shape(),
            EntryValue::Quantized(q) => q.payload.shape(),
            EntryValue::Sparse(s) => s.shape(),
        }
    }

    /// Logical element count (dense).
    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Storage cost used for size accounting: `width` bytes per float
    /// element, one byte per quantized element plus scale and zero point, and
    /// eight bytes per stored sparse pair plus the count.
    pub fn storage_bytes(&self) -> usize {
        match self {
            EntryValue::Float(t) => t.payload_bytes(),
            EntryValue::Quantized(q) => q.payload.len() + QUANT_META_BYTES,
            EntryValue::Sparse(s) => 8 + 8 * s.nnz(),
        }
    }

    fn flag(&self) -> u8 {
        match self {
            EntryValue::Float(_) => 0,
            EntryValue::Quantized(_) => 1,
            EntryValue::Sparse(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: EntryValue,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: EntryValue) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("entry name longer than 65535 bytes"));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate checkpoint entry `{name}`")));
        }
        if let EntryValue::Float(t) = &value {
            if !t.dtype().is_float() {
                return Err(Error::invalid(format!("float entry `{name}` has dtype {:?}", t.dtype())));
            }
        }
        self.entries.push(CheckpointEntry { name, value });
        Ok(())
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [CheckpointEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&EntryValue> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of parameters (dense element count).
    pub fn count_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn storage_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.value.storage_bytes()).sum()
    }

    /// Storage size in MB (10^6 bytes).
    pub fn size_mb(&self) -> f64 {
        self.storage_bytes() as f64 / 1e6
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.value.flag());
            match &e.value {
                EntryValue::Float(t) => encode_tensor(t, &mut out),
                EntryValue::Quantized(q) => {
                    out.extend_from_slice(&q.params.scale.to_le_bytes());
                    out.extend_from_slice(&q.params.zero_point.to_le_bytes());
                    encode_tensor(&AnyTensor::U8(q.payload.clone()), &mut out);
                }
                EntryValue::Sparse(s) => {
                    out.push(s.shape().len() as u8);
                    for &d in s.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(s.nnz() as u64).to_le_bytes());
                    for (&i, &v) in s.indices().iter().zip(s.values()) {
                        out.extend_from_slice(&i.to_le_bytes());
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let head = take(bytes, &mut pos, 9)?;
        let magic: [u8; 4] = head[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        if head[4] != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: head[4],
            });
        }
        let count = u32::from_le_bytes(head[5..9].try_into().unwrap());
        let u64_at = |pos: &mut usize| -> Result<u64> { Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap())) };

        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(bytes, &mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(bytes, &mut pos, len)?)
                .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let flag = take(bytes, &mut pos, 1)?[0];
            let value = match flag {
                0 => {
                    let (t, used) = decode_tensor(&bytes[pos..])?;
                    pos += used;
                    EntryValue::Float(t)
                }
                1 => {
                    let meta = take(bytes, &mut pos, QUANT_META_BYTES)?;
                    let params = QuantParams {
                        scale: f32::from_le_bytes(meta[..4].try_into().unwrap()),
                        zero_point: i32::from_le_bytes(meta[4..].try_into().unwrap()),
                    };
                    let (t, used) = decode_tensor(&bytes[pos..])?;
                    pos += used;
                    let AnyTensor::U8(payload) = t else {
                        return Err(Error::Malformed(format!("quantized entry `{name}` is not uint8")));
                    };
                    EntryValue::Quantized(QuantizedTensor::new(payload, params)?)
                }
                2 => {
                    let ndim = take(bytes, &mut pos, 1)?[0] as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(u64_at(&mut pos)? as usize);
                    }
                    let nnz = u64_at(&mut pos)? as usize;
                    let pairs = take(bytes, &mut pos, nnz.checked_mul(8).ok_or_else(|| Error::Malformed("sparse count overflows".into()))?)?;
                    let (indices, values) = pairs
                        .chunks_exact(8)
                        .map(|p| {
                            (
                                u32::from_le_bytes(p[..4].try_into().unwrap()),
                                f32::from_le_bytes(p[4..].try_into().unwrap()),
                            )
                        })
                        .unzip();
                    EntryValue::Sparse(SparseTensor::new(shape, indices, values)?)
                }
                other => return Err(Error::Malformed(format!("unknown entry flag {other}"))),
            };
            ckpt.push(name, value)?;
        }
        if pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Dense f32 view of an entry, dequantizing or densifying as needed.
    pub fn dense_f32(&self, name: &str) -> Result<crate::tensor::Tensor<f32>> {
        let value = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no entry `{name}`")))?;
        match value {
            EntryValue::Float(AnyTensor::F32(t)) => Ok(t.clone()),
            EntryValue::Float(AnyTensor::F64(t)) => Ok(t.cast()),
            EntryValue::Float(t) => Err(Error::invalid(format!("entry `{name}` has dtype {:?}", t.dtype()))),
            EntryValue::Quantized(q) => Ok(crate::quant::dequantize(q)),
            EntryValue::Sparse(s) => s.to_dense(),
        }
    }

    /// True if every float entry is f32 (the dtype the model trains in).
    pub fn is_f32(&self) -> bool {
        self.entries.iter().all(|e| match &e.value {
            EntryValue::Float(t) => t.dtype() == DType::F32,
            _ => true,
        })
    }
}
