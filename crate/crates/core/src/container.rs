//! Little-endian binary framing shared by the dataset and checkpoint files:
//! `magic | body | crc32(magic | body)`.

use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Debug, Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        for x in v {
            self.u32(*x);
        }
    }

    /// Packed bits, LSB first.
    pub fn bits(&mut self, v: &[bool]) {
        for chunk in v.chunks(8) {
            self.u8(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)));
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and checksum; the reader starts right after the magic.
    pub fn open(path: &Path, data: &'a [u8], magic: &[u8]) -> Result<Self> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            return Err(Error::Format {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if data.len() < magic.len() + 4 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: data.len() as u64,
                msg: "truncated before checksum".into(),
            });
        }
        let body_end = data.len() - 4;
        let stored = u32::from_le_bytes(data[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&data[..body_end]) != stored {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: body_end as u64,
                msg: "checksum mismatch".into(),
            });
        }
        Ok(Reader {
            path: path.to_path_buf(),
            data: &data[..body_end],
            pos: magic.len(),
        })
    }

    pub fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated: need {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| self.corrupt("length overflow"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn bits(&mut self, n: usize) -> Result<Vec<bool>> {
        let raw = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_damage() {
        let mut w = Writer::new(b"TEST1");
        w.u32(7);
        w.f32s(&[1.5, -2.0]);
        w.bits(&[true, false, true, true, false, false, false, false, true]);
        w.bytes(b"hi");
        let bytes = w.finish();
        let p = Path::new("mem");
        let mut r = Reader::open(p, &bytes, b"TEST1").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f32s(2).unwrap(), vec![1.5, -2.0]);
        assert_eq!(r.bits(9).unwrap(), vec![true, false, true, true, false, false, false, false, true]);
        assert_eq!(r.bytes().unwrap(), b"hi");
        r.finish().unwrap();

        assert!(matches!(Reader::open(p, &bytes, b"OTHER"), Err(Error::Format { .. })));
        let mut flipped = bytes.clone();
        flipped[7] ^= 1;
        assert!(matches!(Reader::open(p, &flipped, b"TEST1"), Err(Error::Corrupt { .. })));
        assert!(matches!(Reader::open(p, &bytes[..bytes.len() - 3], b"TEST1"), Err(Error::Corrupt { .. })));
    }
}
