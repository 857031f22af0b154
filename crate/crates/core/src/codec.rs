//! Canonical byte encoding for everything that is signed or hashed.
//!
//! Fields are written in declaration order. Integers are 8-byte big-endian,
//! fixed-size digests and keys are written raw, real vectors are a u64
//! length followed by each coordinate's IEEE-754 bits in big-endian order,
//! and variable byte strings are u64-length-prefixed. The encoding is
//! bit-exact: block hashes are computed over it.

use crate::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn fixed(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u64(bytes.len() as u64);
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.u64(values.len() as u64);
        for v in values {
            self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        self
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a canonical encoding. Every read is bounds-checked.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "need {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let raw = self.take(8)?;
        Ok(u64::from_be_bytes(raw.try_into().expect("8 bytes")))
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn len_prefix(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let len = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if len.saturating_mul(unit as u64) > remaining {
            return Err(Error::Decode(format!(
                "length prefix {len} at offset {at} exceeds remaining {remaining} bytes"
            )));
        }
        Ok(len as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.len_prefix(1)?;
        self.take(len)
    }

    pub fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Decode(format!("invalid UTF-8 string at offset {at}")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = self.len_prefix(8)?;
        (0..len)
            .map(|_| Ok(f64::from_bits(self.u64()?)))
            .collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Decode(format!(
                "{} trailing bytes at offset {}",
                self.buf.len() - self.pos,
                self.pos
            )))
        }
    }
}
