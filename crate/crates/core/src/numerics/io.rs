//! `SPQT` flat tensor files: `SPQT`, version, dtype, rank, a reserved zero
//! byte, `rank` little-endian u64 extents, then the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const SPQT_MAGIC: &[u8; 4] = b"SPQT";
const SPQT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown SPQT dtype {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Dimension(format!("rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + T::BYTES * t.len());
    buf.extend_from_slice(SPQT_MAGIC);
    buf.extend_from_slice(&[SPQT_VERSION, T::DTYPE as u8, rank, 0]);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor. A payload stored in the other float width is converted.
pub fn read_tensor_from<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head[..4] != SPQT_MAGIC {
        return Err(Error::Format("bad SPQT magic".into()));
    }
    if head[4] != SPQT_VERSION {
        return Err(Error::Format(format!("unsupported SPQT version {}", head[4])));
    }
    let dtype = DType::from_byte(head[5])?;
    let rank = head[6] as usize;
    if head[7] != 0 {
        return Err(Error::Format("SPQT reserved byte must be 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("SPQT extent overflows usize".into()))?;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Format("SPQT element count overflows".into()))?;
        shape.push(d);
    }
    let bytes = len
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format("SPQT payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "SPQT payload truncated: expected {bytes} bytes, got {}",
            payload.len()
        )));
    }
    let data: Vec<T> = if dtype == T::DTYPE {
        payload.chunks_exact(T::BYTES).map(T::read_le).collect()
    } else {
        match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        }
    };
    Tensor::new_unchecked_values(shape, data)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("SPQT stream truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor_from(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after SPQT tensor".into()));
    }
    Ok(t)
}
