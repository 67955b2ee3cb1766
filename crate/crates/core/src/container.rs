//! Shared binary container used by episode files, checkpoints, and dot
//! patterns.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   (owner-specific, e.g. b"PCSG")
//! version    u16
//! n_meta     u32       count of header key=value strings
//! meta       n_meta x (u32 len + utf8 bytes)
//! n_records  u32
//! records    n_records x (u32 len + payload bytes)
//! checksum   u64       FNV-1a over everything before it
//! ```
//!
//! Records carry tensors serialized as `u32 rank, u32 dims..., f64 data...`
//! plus whatever scalar metadata the owner packs in.

use crate::autodiff::Tensor;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed record: {0}")]
    Malformed(String),
}

pub const CONTAINER_VERSION: u16 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// In-memory container: named header strings plus opaque byte records.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Vec<String>,
    pub records: Vec<Vec<u8>>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&self, path: &Path, magic: [u8; 4]) -> Result<(), ContainerError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for m in &self.meta {
            buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
            buf.extend_from_slice(m.as_bytes());
        }
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.len() as u32).to_le_bytes());
            buf.extend_from_slice(r);
        }
        let checksum = fnv1a(&buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self, ContainerError> {
        let bytes = fs::read(path)?;
        Self::parse(&bytes, magic)
    }

    pub fn parse(bytes: &[u8], magic: [u8; 4]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated {
                offset: bytes.len(),
                needed: 8 - bytes.len(),
            });
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(ContainerError::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(ContainerError::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(ContainerError::VersionMismatch {
                expected: CONTAINER_VERSION,
                found: version,
            });
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let len = r.u32()? as usize;
            let s = r.take(len)?;
            meta.push(
                String::from_utf8(s.to_vec())
                    .map_err(|e| ContainerError::Malformed(e.to_string()))?,
            );
        }
        let n_rec = r.u32()? as usize;
        let mut records = Vec::with_capacity(n_rec);
        for _ in 0..n_rec {
            let len = r.u32()? as usize;
            records.push(r.take(len)?.to_vec());
        }
        Ok(Self { meta, records })
    }

    /// Look up a `key=value` header entry.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find_map(|m| m.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.buf.len() {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Append-only record encoder for tensors and scalars.
#[derive(Default)]
pub struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over one record payload.
pub struct RecordReader<'a> {
    r: Reader<'a>,
}

impl<'a> RecordReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            r: Reader { buf, pos: 0 },
        }
    }

    pub fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.r.take(8)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, ContainerError> {
        self.r.u32()
    }

    pub fn tensor(&mut self) -> Result<Tensor, ContainerError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(ContainerError::Malformed(format!(
                "implausible tensor rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(Tensor::new(shape, data))
    }

    pub fn done(&self) -> bool {
        self.r.pos == self.r.buf.len()
    }
}
