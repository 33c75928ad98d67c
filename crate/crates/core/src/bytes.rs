//! Little-endian framed reads/writes shared by the bank and checkpoint
//! file formats.

use std::io::{Read, Write};

use crate::error::{MbcError, Result};

pub(crate) struct ByteReader<R: Read> {
    pub inner: R,
}

impl<R: Read> ByteReader<R> {
    pub fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| MbcError::Format(format!("file truncated reading {what}")))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        let mut b = [0u8; 16];
        self.exact(&mut b, what)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut bytes = vec![0u8; len];
        self.exact(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|_| MbcError::Format(format!("{what} is not UTF-8")))
    }

    pub fn blob(&mut self, what: &str) -> Result<Vec<u8>> {
        let len = self.u32(what)? as usize;
        let mut bytes = vec![0u8; len];
        self.exact(&mut bytes, what)?;
        Ok(bytes)
    }

    /// Error if any payload bytes remain.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut one = [0u8; 1];
        if self.inner.read(&mut one)? != 0 {
            return Err(MbcError::Format("trailing bytes after payload".into()));
        }
        Ok(())
    }
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    if s.len() > u16::MAX as usize {
        return Err(MbcError::Format(format!("string of {} bytes too long", s.len())));
    }
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn write_blob(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}
