//! Little-endian named-tensor container.
//!
//! Layout: magic `AVCK`, version `u32`, tensor count `u32`, then per tensor a
//! `u16` name length and UTF-8 name, a `u8` rank, `u32` extents and the
//! `f64` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_tensors(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::usage("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::usage("tensor name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::usage("tensor rank too large"))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::usage("tensor extent too large"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::format(pos as u64, format!("truncated while reading {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected AVCK"));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap());
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name_bytes = take(len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::format(0, "tensor name is not UTF-8"))?;
        let rank = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4, "extent")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(8 * n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_tensors(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    fs::write(path, encode_tensors(entries)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.1, 1e-300, -0.0]).unwrap()),
            ("s".into(), Tensor::scalar(7.0)),
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = encode_tensors(&sample()).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(encode_tensors(&back).unwrap(), bytes);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        assert!(matches!(decode_tensors(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        bytes[1] = b'Z';
        assert!(matches!(decode_tensors(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
