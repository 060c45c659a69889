//! `EMBD` binary tensor format.
//!
//! Layout: magic `EMBD`, u32 LE version (1), u32 LE rank, `rank` u32 LE dims,
//! then the row-major values as 32-bit LE floats. Values are narrowed to `f32`
//! on write and widened back to `f64` on read.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;

pub fn encode_embd(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(EMBD_MAGIC);
    out.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_embd<W: Write>(mut w: W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode_embd(tensor))
}

/// Cursor over a byte slice that reports the failing offset on truncation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    source_name: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], source_name: &'a str) -> Self {
        Self {
            buf,
            pos: 0,
            source_name,
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn error(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source_name.to_string(),
            location: format!("byte offset {}", self.pos),
            detail: detail.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!("need {n} bytes, only {} remain", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Parse {
                source_name: self.source_name.to_string(),
                location: format!("byte offset {at}"),
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_embd_from(r: &mut ByteReader<'_>) -> Result<Tensor> {
    r.magic(EMBD_MAGIC)?;
    let version = r.u32()?;
    if version != EMBD_VERSION {
        return Err(r.error(format!("unsupported EMBD version {version}")));
    }
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error("dimension product overflows"))?;
    if numel.saturating_mul(4) > r.remaining() {
        return Err(r.error(format!("payload of {numel} floats is truncated")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f64::from(r.f32()?));
    }
    Tensor::new(shape, data)
}

pub fn decode_embd(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes, "EMBD");
    let t = read_embd_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(r.error("trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn read_embd<R: Read>(mut r: R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::io("<EMBD stream>", e))?;
    decode_embd(&buf)
}
