//! Little-endian binary container shared by dataset and checkpoint files:
//!
//! ```text
//! magic[4] | version u32 | body ... | crc32 u32
//! ```
//!
//! The CRC covers every byte before it. Readers verify it before parsing so
//! a truncated or bit-flipped file is reported as corrupt, never misread.

use std::path::{Path, PathBuf};

use crate::diffcore::Grid4;
use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
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

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, vs: &[u32]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Length-prefixed nested record.
    pub fn record(&mut self, body: &[u8]) {
        self.u64(body.len() as u64);
        self.buf.extend_from_slice(body);
    }

    /// Body bytes without the header, for nesting inside `record`.
    pub fn body_only() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    /// Verify CRC and magic; returns the reader positioned after the
    /// version field, and the version.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<(Self, u32)> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 12 {
            return Err(corrupt("file too short"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        if &payload[..4] != magic {
            return Err(corrupt("bad magic"));
        }
        let mut r = Reader {
            buf: payload,
            pos: 4,
            path: path.to_path_buf(),
        };
        let version = r.u32()?;
        Ok((r, version))
    }

    pub fn nested(&self, body: &'a [u8]) -> Reader<'a> {
        Reader {
            buf: body,
            pos: 0,
            path: self.path.clone(),
        }
    }

    pub fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem)
            .is_none_or(|b| b > self.buf.len() - self.pos)
        {
            return Err(self.corrupt("length prefix exceeds data"));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len_prefix(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len_prefix(4)?;
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn record(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

/// Grids are stored losslessly in the narrowest encoding that reproduces
/// every value bit-exactly: 0 = raw f64, 1 = f32, 2 = one byte per {0,1}.
///
/// ```text
/// shape 4×u32 | encoding u8 | payload
/// ```
pub(crate) fn put_grid(w: &mut Writer, g: &Grid4) {
    for d in g.shape() {
        w.u32(d as u32);
    }
    let v = g.values();
    if v.iter().all(|&x| x.to_bits() == 0f64.to_bits() || x == 1.0) {
        w.u8(2);
        w.u64(v.len() as u64);
        w.raw(&v.iter().map(|&x| x as u8).collect::<Vec<u8>>());
    } else if v
        .iter()
        .all(|&x| (x as f32 as f64).to_bits() == x.to_bits())
    {
        w.u8(1);
        w.u64(v.len() as u64);
        w.raw(
            &v.iter()
                .flat_map(|&x| (x as f32).to_le_bytes())
                .collect::<Vec<u8>>(),
        );
    } else {
        w.u8(0);
        w.f64s(v);
    }
}

pub(crate) fn get_grid(r: &mut Reader) -> Result<Grid4> {
    let mut shape = [0usize; 4];
    for d in shape.iter_mut() {
        *d = r.u32()? as usize;
    }
    let values = match r.u8()? {
        0 => r.f64s()?,
        enc @ (1 | 2) => {
            let n = r.u64()? as usize;
            let width = if enc == 1 { 4 } else { 1 };
            let bytes = r.raw(
                n.checked_mul(width)
                    .ok_or_else(|| r.corrupt("grid too large"))?,
            )?;
            if enc == 1 {
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                let mut out = Vec::with_capacity(n);
                for &b in bytes {
                    if b > 1 {
                        return Err(r.corrupt("binary grid byte out of range"));
                    }
                    out.push(b as f64);
                }
                out
            }
        }
        _ => return Err(r.corrupt("unknown grid encoding")),
    };
    Grid4::new(shape, values).map_err(|_| r.corrupt("grid shape does not match payload"))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Content checksum of a container file, for manifests: the CRC32 of
/// everything before the trailer, verified against the trailer. Hashing
/// the whole file would always give the CRC32 residue constant.
pub fn file_crc(path: &Path) -> Result<u32> {
    let bytes = read_file(path)?;
    let Some(split) = bytes.len().checked_sub(4) else {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "file shorter than its checksum".into(),
        });
    };
    let (body, tail) = bytes.split_at(split);
    let crc = crc32fast::hash(body);
    if tail != crc.to_le_bytes() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "checksum mismatch".into(),
        });
    }
    Ok(crc)
}
