//! Little-endian binary encoding shared by the dataset, checkpoint and
//! training-state files. Every file ends with a CRC-32 of all preceding
//! bytes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {found} (this build reads {supported})")]
    Version {
        what: &'static str,
        found: u16,
        supported: u16,
    },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("invalid contents: {0}")]
    Invalid(String),
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Self::default();
        w.bytes(magic);
        w.u16(version);
        w
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    /// u16 length prefix followed by the bytes.
    pub fn short_bytes(&mut self, v: &[u8]) {
        self.u16(u16::try_from(v.len()).expect("field longer than 65535 bytes"));
        self.bytes(v);
    }
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the checksum trailer, magic and version.
    pub fn open(
        data: &'a [u8],
        magic: &[u8; 4],
        what: &'static str,
        version: u16,
    ) -> Result<Self, FormatError> {
        if data.len() >= 4 && &data[..4] != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&data[..4]).into_owned(),
            });
        }
        if data.len() < 10 {
            return Err(FormatError::Truncated);
        }
        let (body, trailer) = data.split_at(data.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(FormatError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let found = r.u16()?;
        if found != version {
            return Err(FormatError::Version {
                what,
                found,
                supported: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }
    pub fn short_bytes(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.u16()? as usize;
        self.take(n)
    }
    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FormatError::Invalid(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut w = Writer::new(b"TEST", 3);
        w.u32(7);
        w.short_bytes(b"abc");
        let bytes = w.finish();

        let mut r = Reader::open(&bytes, b"TEST", "test", 3).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.short_bytes().unwrap(), b"abc");
        r.finish().unwrap();

        let mut bad = bytes.clone();
        bad[7] ^= 1;
        assert!(matches!(Reader::open(&bad, b"TEST", "test", 3), Err(FormatError::Checksum)));
        assert!(matches!(
            Reader::open(&bytes[..bytes.len() - 1], b"TEST", "test", 3),
            Err(FormatError::Checksum)
        ));
        assert!(matches!(
            Reader::open(&bytes, b"TEST", "test", 4),
            Err(FormatError::Version { .. })
        ));
        assert!(matches!(
            Reader::open(&bytes, b"NOPE", "test", 3),
            Err(FormatError::BadMagic { .. })
        ));
    }
}
