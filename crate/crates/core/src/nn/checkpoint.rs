//! Binary weight files: `"MDGD"`, version, tensor count, then per tensor
//! name, rank, dims and a little-endian `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDGD";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected MDGD".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "enc.0.w".into(),
                Tensor {
                    shape: vec![2, 3],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-20, f32::MAX, -7.25],
                },
            ),
            (
                "scalar".into(),
                Tensor {
                    shape: vec![],
                    data: vec![0.1],
                },
            ),
            (
                "héad".into(),
                Tensor {
                    shape: vec![0, 4],
                    data: vec![],
                },
            ),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let e = sample();
        let bytes = encode_checkpoint(&e);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), e.len());
        for ((n1, t1), (n2, t2)) in e.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let b1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample()[..1]);
        assert_eq!(&bytes[..4], b"MDGD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 7);
        assert_eq!(&bytes[16..23], b"enc.0.w");
        assert_eq!(bytes.len(), 23 + 4 + 8 + 24);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_checkpoint(&p, &sample()).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), sample());
    }
}
