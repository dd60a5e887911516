//! Canonical byte encoding shared by every ledger payload.
//!
//! The wire rules are fixed so that independently written encoders produce
//! identical bytes and therefore identical block hashes:
//!
//! - integers: 8-byte big-endian (unsigned `u64`, signed `i64` two's complement)
//! - byte-strings and UTF-8 text: 4-byte big-endian length prefix + content
//! - fixed-width values (32-byte digests, 32-byte keys, 64-byte signatures,
//!   16-byte nonces): raw bytes, no prefix
//! - list fields: 4-byte big-endian element count, then elements in order
//! - payload variants: 1-byte tag, then fields in declared order
//! - single-byte discriminants (verdicts, decisions, roles): 1 byte
//! - no padding anywhere

use thiserror::Error;

/// Limit on any single length prefix. Keeps a corrupted prefix from
/// triggering a huge allocation while decoding.
pub const MAX_FIELD_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input at byte {at}: needed {needed} more")]
    Truncated { at: usize, needed: usize },
    #[error("length prefix {len} exceeds limit")]
    OversizedField { len: u32 },
    #[error("text field is not valid UTF-8")]
    InvalidUtf8,
    #[error("{0} bytes left over after decoding")]
    TrailingBytes(usize),
    #[error("unknown variant tag {0}")]
    UnknownTag(u8),
    #[error("invalid value for {field}: {detail}")]
    InvalidValue {
        field: &'static str,
        detail: String,
    },
}

/// Append-only canonical encoder.
#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn put_i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Fixed-width value: raw bytes, no length prefix.
    pub fn put_fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Variable byte-string: 4-byte big-endian length, then content.
    pub fn put_bytes(&mut self, v: &[u8]) -> &mut Self {
        debug_assert!(v.len() <= MAX_FIELD_LEN as usize);
        self.buf.extend_from_slice(&(v.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    /// UTF-8 text: encoded exactly like a byte-string.
    pub fn put_text(&mut self, v: &str) -> &mut Self {
        self.put_bytes(v.as_bytes())
    }

    /// List count prefix; elements follow via the other put_* calls.
    pub fn put_count(&mut self, n: usize) -> &mut Self {
        debug_assert!(n <= MAX_FIELD_LEN as usize);
        self.buf.extend_from_slice(&(n as u32).to_be_bytes());
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

/// Strict canonical decoder. Every field read is bounds-checked and callers
/// are expected to call [`Reader::finish`] so trailing garbage is rejected.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                at: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        let b = self.take(8)?;
        Ok(i64::from_be_bytes(b.try_into().unwrap()))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let b = self.take(N)?;
        Ok(b.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap());
        if len > MAX_FIELD_LEN {
            return Err(WireError::OversizedField { len });
        }
        Ok(self.take(len as usize)?.to_vec())
    }

    pub fn text(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?).map_err(|_| WireError::InvalidUtf8)
    }

    pub fn count(&mut self) -> Result<usize, WireError> {
        let n = u32::from_be_bytes(self.take(4)?.try_into().unwrap());
        if n > MAX_FIELD_LEN {
            return Err(WireError::OversizedField { len: n });
        }
        Ok(n as usize)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Reject any bytes left after the last declared field.
    pub fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            Err(WireError::TrailingBytes(self.buf.len() - self.pos))
        } else {
            Ok(())
        }
    }
}
