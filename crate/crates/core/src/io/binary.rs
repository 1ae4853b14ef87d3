//! Little-endian primitives shared by the container formats.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.offset;
        if n > left {
            return Err(FormatError::Truncated {
                offset: self.offset,
                expected: n,
                actual: left,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let at = self.offset;
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset: at,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<(), FormatError> {
        let at = self.offset;
        let found = self.u32()?;
        if found != supported {
            return Err(FormatError::UnsupportedVersion {
                offset: at,
                found,
                supported,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let len = self.usize()?;
        let at = self.offset;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|e| self.invalid_at(at, format!("string is not UTF-8: {e}")))
    }

    /// `count` values; the whole payload length is checked up front so a
    /// truncation reports the full expected byte count.
    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let b = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| self.invalid("payload size overflows"))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>, FormatError> {
        let b = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| self.invalid("payload size overflows"))?,
        )?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn invalid(&self, reason: impl Into<String>) -> FormatError {
        self.invalid_at(self.offset, reason)
    }

    pub fn invalid_at(&self, offset: usize, reason: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset,
            reason: reason.into(),
        }
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.offset != self.bytes.len() {
            return Err(self.invalid(format!("{} trailing bytes", self.bytes.len() - self.offset)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Sizes above `u32::MAX` cannot be represented by the formats.
    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("size fits the u32 header field"));
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.raw(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}
