//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PECA" | version: u32 | record*
//! record = name_len: u32 | name: UTF-8 | rank: u32 | extents: u64 * rank | payload: f64 * prod(extents)
//! ```
//!
//! Records run until end of file.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PECA";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {} bytes", name.len())))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing PECA magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extent product overflows for {name}")))?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(std::fs::File::open(path)?)
}

/// Looks up a record by name.
pub fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("missing tensor record '{name}'")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        write_tensors(&mut buf, &[("w".to_string(), t)]).unwrap();
        assert_eq!(&buf[..4], b"PECA");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 41);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::ones(&[3]))]).unwrap();
        buf.pop();
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 0..4),
                      seed in any::<u64>()) {
            let records: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| ((seed.wrapping_add(j as u64) % 1000) as f64 - 500.0) / 7.0).collect();
                (format!("t{i}.é"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &records).unwrap();
            prop_assert_eq!(read_tensors(&buf[..]).unwrap(), records);
        }
    }
}
