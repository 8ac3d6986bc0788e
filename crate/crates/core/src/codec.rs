//! Length-prefixed binary encoding for chain structures.
//!
//! Transactions and blocks are hashed over these bytes, so the encoding is
//! fixed and language-independent: big-endian fixed-width integers, u32
//! length prefixes for byte strings, u32 count prefixes for lists, fields in
//! declared order. The full layout is documented in `docs/block-format.md`.

/// Encoder that appends primitives to an owned buffer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn fixed32(&mut self, v: &[u8; 32]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Decoder over a byte slice; every read checks bounds.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated input at offset {0}")]
    Truncated(usize),
    #[error("invalid enum tag {tag} at offset {at}")]
    BadTag { tag: u8, at: usize },
    #[error("invalid utf-8 string at offset {0}")]
    BadUtf8(usize),
    #[error("trailing bytes after value (offset {0})")]
    Trailing(usize),
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn fixed32(&mut self) -> Result<[u8; 32], CodecError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let at = self.pos;
        String::from_utf8(self.bytes()?).map_err(|_| CodecError::BadUtf8(at))
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Read a list count, rejecting counts that cannot possibly fit in
    /// the remaining input. Keeps a corrupted count from driving a huge
    /// allocation before the per-element reads would fail anyway.
    pub fn count(&mut self, min_element_bytes: usize) -> Result<usize, CodecError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_element_bytes) > self.remaining() {
            return Err(CodecError::Truncated(at));
        }
        Ok(n)
    }

    /// Fail unless the whole input was consumed.
    pub fn expect_end(&self) -> Result<(), CodecError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CodecError::Trailing(self.pos))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_roundtrip() {
        let mut w = Writer::new();
        w.u8(7).u32(1000).u64(u64::MAX).i64(-42).str("héllo").bytes(&[1, 2, 3]);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 1000);
        assert_eq!(r.u64().unwrap(), u64::MAX);
        assert_eq!(r.i64().unwrap(), -42);
        assert_eq!(r.str().unwrap(), "héllo");
        assert_eq!(r.bytes().unwrap(), vec![1, 2, 3]);
        assert!(r.expect_end().is_ok());
    }

    #[test]
    fn truncation_is_detected() {
        let mut w = Writer::new();
        w.str("abcdef");
        let buf = w.finish();
        let mut r = Reader::new(&buf[..buf.len() - 2]);
        assert!(matches!(r.str(), Err(CodecError::Truncated(_))));
    }

    #[test]
    fn impossible_list_count_is_rejected() {
        let mut w = Writer::new();
        w.u32(u32::MAX).bytes(&[0; 16]);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.count(4), Err(CodecError::Truncated(0)));

        let mut w = Writer::new();
        w.u32(3).u8(1).u8(0).u8(1);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.count(1), Ok(3));
    }
}
