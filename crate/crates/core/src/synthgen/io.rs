//! Little-endian tensor container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "MC3D"
//! 4       1         version (1)
//! 5       1         dtype (0 = f32, 1 = f64, 2 = u8)
//! 6       1         ndim
//! 7       1         padding (0)
//! 8       8*ndim    extents, u64 each
//! ...               row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MC3D";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Serializes `t`. `U8` requires integral values in `0..=255`.
pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::dim("encode", format!("{} axes exceed u8", t.ndim())));
    }
    let mut out = Vec::with_capacity(HEADER + 8 * t.ndim() + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::U8 => {
            for &v in t.data() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Contract(format!("{v} is not representable as u8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Parses one tensor from the front of `bytes`; returns it with its on-disk
/// dtype and the number of bytes consumed. `origin` names the source in errors.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<(Tensor, DType, usize)> {
    let fail = |d: String| Error::format(origin, d);
    if bytes.len() < HEADER {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| fail(format!("unknown dtype {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(fail("zero-dimensional tensor".into()));
    }
    let dims_end = HEADER + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(fail("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let raw = u64::from_le_bytes(bytes[HEADER + 8 * i..HEADER + 8 * i + 8].try_into().unwrap());
        let d = usize::try_from(raw).map_err(|_| fail(format!("extent {raw} overflows")))?;
        if d == 0 {
            return Err(fail("zero extent".into()));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(format!("dimension overflow in {shape:?}")))?;
    let payload = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| fail(format!("dimension overflow in {shape:?}")))?;
    let end = dims_end
        .checked_add(payload)
        .ok_or_else(|| fail(format!("dimension overflow in {shape:?}")))?;
    if bytes.len() < end {
        return Err(fail(format!(
            "truncated payload: need {payload} bytes, have {}",
            bytes.len() - dims_end
        )));
    }
    let body = &bytes[dims_end..end];
    let data: Vec<f64> = match dtype {
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::U8 => body.iter().map(|&b| b as f64).collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype, end))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, _, used) = decode_tensor(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}
