//! Binary file formats. All integers and floats are little-endian and every
//! file ends with a CRC32 of the bytes before it. See `docs/formats.md`.

mod checkpoint;
mod dataset;
mod image;
mod replay;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{dequantize, quantize, Record, RolloutDataset};
pub use image::{encode_png, save_png};
pub use replay::{Replay, ReplayStep};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
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

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Sequential reader that reports the byte offset of any short read.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and version, returning a reader positioned after them.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != magic {
            return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let v = r.u32()?;
        if v != version {
            return Err(Error::Version(v));
        }
        Ok(r)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.buf.len() as u64 });
        }
        let s = &self.buf[self.pos..self.pos + n];
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

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    /// Fails unless `n` items of `item` bytes each can still be read, so that
    /// corrupted counts never trigger huge allocations.
    pub fn ensure(&self, n: usize, item: usize) -> Result<()> {
        match n.checked_mul(item) {
            Some(total) if total <= self.buf.len() - self.pos => Ok(()),
            _ => Err(Error::Truncated { offset: self.buf.len() as u64 }),
        }
    }

    /// Verifies the trailing checksum, which must be all that remains.
    pub fn finish(mut self) -> Result<()> {
        let body = self.pos;
        let stored = self.u32()?;
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        if crc32fast::hash(&self.buf[..body]) != stored {
            return Err(Error::Checksum);
        }
        Ok(())
    }
}
