//! Little-endian readers and writers shared by the binary artifact formats.

use std::io::{self, Read, Write};

use xxhash_rust::xxh3::{xxh3_64, Xxh3};

use crate::error::{Error, Result};

/// 64-bit checksum used to bind artifacts to each other.
pub fn checksum(bytes: &[u8]) -> u64 {
    xxh3_64(bytes)
}

/// `io::Write` sink that hashes everything written to it.
#[derive(Default)]
pub struct HashSink {
    hasher: Xxh3,
    written: u64,
}

impl HashSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(&self) -> u64 {
        self.hasher.digest()
    }

    pub fn written(&self) -> u64 {
        self.written
    }
}

impl Write for HashSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.hasher.update(buf);
        self.written += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Wraps a writer and counts bytes.
pub struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> CountingWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, count: 0 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn put(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.inner.write_all(bytes)?;
        self.count += bytes.len() as u64;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.put(&[v])
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    /// u16 length prefix followed by the UTF-8 bytes.
    pub fn short_str(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::invalid(format!("string of {} bytes exceeds u16 length", s.len())))?;
        self.u16(len)?;
        self.put(s.as_bytes())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Bounds-checked cursor over an in-memory artifact.
pub struct ByteReader<'a> {
    format: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(format: &'static str, bytes: &'a [u8]) -> Self {
        Self {
            format,
            bytes,
            pos: 0,
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                format: self.format,
                offset: self.pos,
                needed: n - self.remaining(),
                field,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, field)?);
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let version = self.u32("format_version")?;
        if version != supported {
            return Err(Error::UnsupportedVersion {
                format: self.format,
                version,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }

    pub fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }

    pub fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(field)?))
    }

    pub fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }

    pub fn short_str(&mut self, field: &'static str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let at = self.pos;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed_at(at, format!("{field} is not UTF-8")))
    }

    /// Checks that a declared element count can fit in the remaining bytes.
    pub fn expect_room(&self, count: u64, width: usize, field: &'static str) -> Result<usize> {
        let need = count
            .checked_mul(width as u64)
            .filter(|n| *n <= usize::MAX as u64)
            .ok_or_else(|| self.malformed(format!("{field} count {count} overflows")))?;
        if (self.remaining() as u64) < need {
            return Err(Error::Truncated {
                format: self.format,
                offset: self.pos,
                needed: (need - self.remaining() as u64) as usize,
                field,
            });
        }
        Ok(count as usize)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing byte(s)", self.remaining())));
        }
        Ok(())
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        self.malformed_at(self.pos, reason)
    }

    pub fn malformed_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Malformed {
            format: self.format,
            offset,
            reason: reason.into(),
        }
    }
}

pub fn read_all(mut source: impl Read) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Writes `bytes` to `path` atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
