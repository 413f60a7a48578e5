//! Persistent state: embedding caches (`OVCE`), fitted Gaussian parameters
//! (`OVCM`), prompt heads (`OVCP`), and per-input certification metadata.
//!
//! Binary files are little-endian: a 4-byte magic, a `u32` format version,
//! the header fields, the payload, then a 64-bit FNV-1a checksum over every
//! preceding byte. Writes go through a temp file in the target directory and
//! a rename.

mod embedding;
mod meta;
mod mvn;
mod prompt;

use std::io::Write;
use std::path::Path;

pub use embedding::{
    build_embedding_cache, embedding_fingerprint, load_embedding_cache, write_embedding_cache, EmbeddingCache,
};
pub use meta::{load_cert_meta, store_cert_meta, CertMetaCache, MetaEntry};
pub use mvn::{
    cholesky, cholesky_with_jitter, fit_mvn, load_mvn, sample_mvn, transform_mvn, write_mvn, MvnParams,
};
pub use prompt::{load_prompt_head, write_prompt_head};

use crate::error::{OvcError, Result};
use crate::noise::Fnv64;

pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| OvcError::Io(e.error))?;
    Ok(())
}

pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub(crate) fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub(crate) fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub(crate) fn f32s(&mut self, vals: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub(crate) fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        let mut h = Fnv64::new();
        h.write(&self.buf);
        let sum = h.finish();
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

pub(crate) struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Checks magic and version, leaving the cursor at the first header field.
    pub(crate) fn open(data: &'a [u8], magic: &[u8; 4], origin: &str) -> Result<Self> {
        let mut r = Self { data, pos: 0 };
        let found = r.take(4, "magic")?;
        if found != magic {
            return Err(OvcError::MagicMismatch {
                path: origin.to_string(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u32("format_version")?;
        if version != FORMAT_VERSION {
            return Err(OvcError::VersionUnsupported {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(r)
    }

    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(OvcError::Truncated {
                field: field.to_string(),
            }),
        }
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let len = count.checked_mul(4).ok_or_else(|| OvcError::Truncated {
            field: field.to_string(),
        })?;
        Ok(self
            .take(len, field)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn str(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| OvcError::Corrupt(format!("field `{field}` is not UTF-8")))
    }

    /// Verifies the trailing checksum and that nothing follows it.
    pub(crate) fn finish(mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u64("checksum")?;
        if self.pos != self.data.len() {
            return Err(OvcError::Corrupt(format!(
                "{} trailing bytes after checksum",
                self.data.len() - self.pos
            )));
        }
        let mut h = Fnv64::new();
        h.write(&self.data[..body_end]);
        let computed = h.finish();
        if computed != stored {
            return Err(OvcError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            OvcError::CacheMiss(vec![path.to_path_buf()])
        } else {
            OvcError::Io(e)
        }
    })
}
