//! Raw `.xwt` tensor files.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `XWT0`                            |
//! | 4      | 4    | rows (u32)                              |
//! | 8      | 4    | cols (u32)                              |
//! | 12     | 4    | dtype (u32): 0 = binary32, 1 = binary16 |
//! | 16     | ...  | row-major payload                       |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fp16::Half;
use crate::tensor::WeightMatrix;

pub const MAGIC: [u8; 4] = *b"XWT0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F16 = 1,
}

impl Dtype {
    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            other => Err(Error::InvalidArgument(format!("unknown xwt dtype tag {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

pub fn encode(w: &WeightMatrix, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + w.numel() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&dim_u32(w.rows())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(w.cols())?.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    match dtype {
        Dtype::F32 => {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F16 => {
            for &v in w.data() {
                out.extend_from_slice(&Half::try_from_f32(v)?.to_bits().to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<WeightMatrix> {
    if bytes.len() < 16 {
        return Err(Error::Truncated("xwt header"));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let rows = word(4) as usize;
    let cols = word(8) as usize;
    let dtype = Dtype::from_tag(word(12))?;
    let payload = &bytes[16..];
    let numel = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::InvalidMatrix("dimension overflow".into()))?;
    if payload.len() < numel * dtype.size() {
        return Err(Error::Truncated("xwt payload"));
    }
    if payload.len() > numel * dtype.size() {
        return Err(Error::InvalidArgument("trailing bytes after xwt payload".into()));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| Half::from_bits(u16::from_le_bytes(c.try_into().unwrap())).map(Half::to_f32))
            .collect::<Result<Vec<_>>>()?,
    };
    WeightMatrix::new(rows, cols, data)
}

pub fn write(path: impl AsRef<Path>, w: &WeightMatrix, dtype: Dtype) -> Result<()> {
    let bytes = encode(w, dtype)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::InvalidMatrix(format!("dimension {d} exceeds u32")))
}
