//! Binary tensor container.
//!
//! Layout (all little-endian): magic `b"SIRT"`, `u32` version (1), `u32` dtype
//! (0 = f32), `u32` ndim, `ndim` x `u32` dims, then the row-major f32 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SIRT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} imply {count} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let word = |i: usize| -> std::result::Result<u32, String> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| "truncated header".to_string())
    };
    if bytes.get(0..4) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = word(8)?;
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype {dtype}"));
    }
    let ndim = word(12)? as usize;
    let dims = (0..ndim)
        .map(|k| word(16 + 4 * k).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let start = 16 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * count {
        return Err(format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            payload.len(),
            4 * count
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[2, 1], &[1.0, -2.5]).unwrap();
        assert_eq!(&bytes[0..4], b"SIRT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&[3], &[0.0, 1.0, 2.0]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 7;
        assert!(decode(&bytes).unwrap_err().contains("dtype"));
        assert!(decode(b"NOPE").is_err());
        assert!(encode(&[2, 2], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let back = decode(&encode(&dims, &data).unwrap()).unwrap();
            prop_assert_eq!(back.dims, dims);
            prop_assert_eq!(back.data, data);
        }
    }
}
