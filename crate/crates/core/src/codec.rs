//! Little-endian binary framing shared by the model and head file formats.
//!
//! Every file ends in a CRC-64 (XZ polynomial) over all preceding bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// CRC-64 over the raw little-endian bytes of a tensor sequence.
pub fn tensors_checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut digest = CRC64.digest();
    for t in tensors {
        for v in t.data() {
            digest.update(&v.to_le_bytes());
        }
    }
    digest.finalize()
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
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

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Element count followed by the raw values.
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.numel() as u32);
        self.buf.reserve(4 * t.numel());
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc64(&self.buf);
        self.u64(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing CRC and magic, returning a reader positioned
    /// after the version field along with the version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<(Self, u32)> {
        let corrupt = |msg: String| Error::Corrupted {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let actual = crc64(body);
        if stored != actual {
            return Err(corrupt(format!("CRC mismatch: stored {stored:016x}, computed {actual:016x}")));
        }
        if &body[..4] != magic {
            return Err(corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&body[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Reader {
            buf: body,
            pos: 4,
            path: path.to_path_buf(),
        };
        let version = r.u32()?;
        Ok((r, version))
    }

    pub fn corrupted(&self, msg: impl Into<String>) -> Error {
        Error::Corrupted {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupted(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| self.corrupted(format!("invalid UTF-8: {e}")))
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = self.u32()? as usize;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(self.corrupted(format!("tensor {name}: {n} elements, expected {want}")));
        }
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(name, shape, data)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupted(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
