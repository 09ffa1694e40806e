//! Binary tensor container used for model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SDNN"
//! version u16      currently 1
//! count   u32      number of tensors
//! repeated `count` times:
//!   name_len u16, name (UTF-8)
//!   dtype    u8    0 = f64, 1 = f32, 2 = i8, 3 = i32
//!   rank     u8    1..=8
//!   dims     u32 × rank, each >= 1
//!   payload  product(dims) elements, little-endian
//! ```
//!
//! Floating-point payloads are stored bit-for-bit, so a decode of an encode is
//! exact including NaN payloads.

use thiserror::Error;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDNN";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor {index}: name is not valid UTF-8")]
    InvalidName { index: usize },
    #[error("tensor {index}: unknown dtype tag {tag}")]
    UnknownDType { index: usize, tag: u8 },
    #[error("tensor {index}: invalid rank {rank}")]
    InvalidRank { index: usize, rank: usize },
    #[error("tensor {index}: zero-sized dimension")]
    ZeroDim { index: usize },
    #[error("tensor {index}: element count overflows")]
    Overflow { index: usize },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("tensor `{name}`: {msg}")]
    Content { name: String, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::I8(_) => 2,
            TensorData::I32(_) => 3,
        }
    }

    fn elem_size(tag: u8) -> Option<usize> {
        match tag {
            0 => Some(8),
            1 | 3 => Some(4),
            2 => Some(1),
            _ => None,
        }
    }

    /// Payload size in bytes.
    pub fn byte_len(&self) -> usize {
        self.len() * Self::elem_size(self.tag()).expect("known tag")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    fn content_err(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Content {
            name: self.name.clone(),
            msg: msg.into(),
        }
    }

    pub fn to_tensor(&self) -> std::result::Result<Tensor, FormatError> {
        match &self.data {
            TensorData::F64(v) => Tensor::new(self.shape.clone(), v.clone())
                .map_err(|e| self.content_err(e.to_string())),
            _ => Err(self.content_err("expected f64 payload")),
        }
    }

    pub fn as_i8(&self) -> std::result::Result<&[i8], FormatError> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            _ => Err(self.content_err("expected i8 payload")),
        }
    }

    pub fn as_i32(&self) -> std::result::Result<&[i32], FormatError> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            _ => Err(self.content_err("expected i32 payload")),
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        assert!(t.name.len() <= u16::MAX as usize, "tensor name too long");
        assert!(
            (1..=MAX_RANK).contains(&t.shape.len()),
            "tensor rank out of range"
        );
        assert_eq!(
            t.shape.iter().product::<usize>(),
            t.data.len(),
            "shape/payload mismatch for `{}`",
            t.name
        );
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.tag());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
        }
        match &t.data {
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    // Each tensor needs at least 9 header bytes; cap preallocation accordingly.
    let mut tensors = Vec::with_capacity(count.min(bytes.len() / 9));
    for index in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::InvalidName { index })?
            .to_string();
        let tag = r.u8()?;
        let elem = TensorData::elem_size(tag).ok_or(FormatError::UnknownDType { index, tag })?;
        let rank = r.u8()? as usize;
        if !(1..=MAX_RANK).contains(&rank) {
            return Err(FormatError::InvalidRank { index, rank });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(FormatError::ZeroDim { index });
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::Overflow { index })?;
        let nbytes = n.checked_mul(elem).ok_or(FormatError::Overflow { index })?;
        let raw = r.take(nbytes)?;
        let data = match tag {
            0 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::I8(raw.iter().map(|&b| b as i8).collect()),
            _ => TensorData::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(tensors)
}

/// Serializes every parameter as an f64 tensor, in registration order.
pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let tensors: Vec<NamedTensor> = params.iter().map(|(n, t)| NamedTensor::f64(n, t)).collect();
    encode(&tensors)
}

/// Loads values into an already-built parameter set. Every parameter must be
/// present with a matching shape; extra tensors are an error.
pub fn decode_params_into(bytes: &[u8], params: &mut ParamSet) -> Result<()> {
    let tensors = decode(bytes)?;
    if tensors.len() != params.len() {
        return Err(FormatError::Content {
            name: "<container>".into(),
            msg: format!(
                "holds {} tensors, model expects {}",
                tensors.len(),
                params.len()
            ),
        }
        .into());
    }
    for t in &tensors {
        params.set(&t.name, t.to_tensor()?)?;
    }
    Ok(())
}
