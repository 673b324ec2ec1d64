//! Little-endian binary container primitives shared by the checkpoint,
//! Fisher-map and mask file formats.
//!
//! Every container starts with an 8-byte magic and a `u32` format version.
//! Strings and arrays are length-prefixed with a `u64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, magic: &[u8; 8], version: u32) -> Result<Self> {
        inner.write_all(magic)?;
        inner.write_all(&version.to_le_bytes())?;
        Ok(Self { inner })
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u64(shape.len() as u64)?;
        for &d in shape {
            self.u64(d as u64)?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
}

/// Upper bound on any single length prefix; guards allocation on corrupt input.
const MAX_LEN: u64 = 1 << 40;

impl<R: Read> Reader<R> {
    /// Checks the magic and returns the reader with the stored version.
    pub fn new(mut inner: R, magic: &[u8; 8]) -> Result<(Self, u32)> {
        let mut m = [0u8; 8];
        inner.read_exact(&mut m)?;
        if &m != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&m)
            )));
        }
        let mut v = [0u8; 4];
        inner.read_exact(&mut v)?;
        Ok((Self { inner }, u32::from_le_bytes(v)))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::Format(format!("length prefix {n} is implausible")));
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let ndim = self.len()?;
        if ndim > 16 {
            return Err(Error::Format(format!("{ndim} dimensions")));
        }
        (0..ndim).map(|_| self.len()).collect()
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.inner.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Fails unless the input is fully consumed.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes".into())),
        }
    }
}

pub fn expect_version(found: u32, supported: u32, what: &str) -> Result<()> {
    if found != supported {
        return Err(Error::Format(format!(
            "{what} version {found} is not supported (expected {supported})"
        )));
    }
    Ok(())
}
