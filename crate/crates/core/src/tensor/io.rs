//! NSWT binary tensor records.
//!
//! Layout: `b"NSWT"`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64), `u8` ndim,
//! `ndim` little-endian `u64` extents, then the row-major little-endian scalars.
//! Records may be concatenated back to back in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NSWT";
pub const VERSION: u8 = 1;

/// A tensor of either on-disk element type.
#[derive(Clone, Debug, PartialEq)]
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

    /// Converts to `T`, casting when the stored dtype differs.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format { path: "<stream>".into(), detail: detail.into() }
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_any<R: Read>(r: &mut R) -> Result<Option<AnyTensor>> {
    let mut head = [0u8; 7];
    let mut got = 0;
    while got < head.len() {
        let k = r.read(&mut head[got..])?;
        if k == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(format_err("truncated header"));
        }
        got += k;
    }
    if &head[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    if head[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => DType::F32,
        1 => DType::F64,
        d => return Err(format_err(format!("unknown dtype tag {d}"))),
    };
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| format_err("truncated shape"))?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * dtype.size()];
    r.read_exact(&mut raw).map_err(|_| format_err("truncated payload"))?;
    Ok(Some(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
    }))
}

pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_any(&mut r)
        .map_err(|e| relabel(e, path))?
        .map(AnyTensor::into_tensor)
        .ok_or_else(|| Error::Format { path: path.into(), detail: "empty file".into() })
}

/// Reads every concatenated record from a file.
pub fn load_all(path: &Path) -> Result<Vec<AnyTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_any(&mut r).map_err(|e| relabel(e, path))? {
        out.push(t);
    }
    Ok(out)
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { detail, .. } => Error::Format { path: path.into(), detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NSWT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..23], &1u64.to_le_bytes());
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(&b[27..31], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn concatenated_records_read_back() {
        let a = Tensor::<f64>::new([3], vec![0.1, 0.2, 0.3]).unwrap();
        let b = Tensor::<f32>::new([1, 2], vec![7.0, 8.0]).unwrap();
        let mut buf = encode(&a);
        buf.extend(encode(&b));
        let mut r = &buf[..];
        assert_eq!(read_any(&mut r).unwrap(), Some(AnyTensor::F64(a)));
        assert_eq!(read_any(&mut r).unwrap(), Some(AnyTensor::F32(b)));
        assert_eq!(read_any(&mut r).unwrap(), None);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f32>::new([2], vec![1.0, 2.0]).unwrap();
        let mut b = encode(&t);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(read_any(&mut &bad[..]).is_err());
        b.truncate(b.len() - 1);
        assert!(read_any(&mut &b[..]).is_err());
    }
}
