use std::path::Path;

use super::{read_file, write_atomic, BinReader, BinWriter};
use crate::certify::CertConfig;
use crate::error::{OvcError, Result};
use crate::model::{Encoder, InputPoint};
use crate::noise::{encode_draws, Fnv64, NoiseStream};

const MAGIC: &[u8; 4] = b"OVCE";

/// Encoder outputs for every noisy copy of one input at one noise level.
///
/// Rows `[0, n0)` are the selection draw and rows `[n0, n0 + n)` the
/// estimation draw, laid out exactly as the live certifier samples them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub input_id: u64,
    pub sigma: f64,
    pub master_seed: u64,
    pub chunk_size: usize,
    pub n0: usize,
    pub n: usize,
    pub dim: usize,
    pub fingerprint: u64,
    pub rows: Vec<f32>,
}

pub fn embedding_fingerprint(master_seed: u64, sigma: f64, chunk_size: usize, n0: usize, n: usize) -> u64 {
    let mut h = Fnv64::new();
    for v in [master_seed, sigma.to_bits(), chunk_size as u64, n0 as u64, n as u64] {
        h.write_u64(v);
    }
    h.finish()
}

impl EmbeddingCache {
    pub fn num_rows(&self) -> usize {
        self.n0 + self.n
    }

    pub fn selection_rows(&self) -> &[f32] {
        &self.rows[..self.n0 * self.dim]
    }

    pub fn estimation_rows(&self) -> &[f32] {
        &self.rows[self.n0 * self.dim..]
    }

    /// Confirms this cache was built for `input_id` under `cfg`'s noise level and sample sizes.
    pub fn check_compatible(&self, input_id: u64, cfg: &CertConfig) -> Result<()> {
        if self.input_id != input_id {
            return Err(OvcError::FingerprintMismatch(format!(
                "cache holds input {}, requested input {input_id}",
                self.input_id
            )));
        }
        let expected = embedding_fingerprint(self.master_seed, cfg.sigma, self.chunk_size, cfg.n0, cfg.n);
        if expected != self.fingerprint {
            return Err(OvcError::FingerprintMismatch(format!(
                "cache built at sigma={}, n0={}, n={}; requested sigma={}, n0={}, n={}",
                self.sigma, self.n0, self.n, cfg.sigma, cfg.n0, cfg.n
            )));
        }
        Ok(())
    }

    /// Serialized size in bytes.
    pub fn file_len(&self) -> usize {
        Self::encoded_len(self.num_rows(), self.dim)
    }

    /// Size of an `OVCE` file holding `rows x dim` embeddings.
    pub fn encoded_len(rows: usize, dim: usize) -> usize {
        4 + 4 + 8 * 7 + 4 + 4 * rows * dim + 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.u64(self.input_id)
            .f64(self.sigma)
            .u64(self.master_seed)
            .u64(self.chunk_size as u64)
            .u64(self.n0 as u64)
            .u64(self.n as u64)
            .u32(self.dim as u32)
            .u64(self.fingerprint)
            .f32s(self.rows.iter().copied());
        w.finish()
    }

    pub fn from_bytes(data: &[u8], origin: &str) -> Result<Self> {
        let mut r = BinReader::open(data, MAGIC, origin)?;
        let input_id = r.u64("input_id")?;
        let sigma = r.f64("sigma")?;
        let master_seed = r.u64("master_seed")?;
        let chunk_size = r.u64("chunk_size")? as usize;
        let n0 = r.u64("n0")? as usize;
        let n = r.u64("n")? as usize;
        let dim = r.u32("dim")? as usize;
        let fingerprint = r.u64("fingerprint")?;
        let count = n0
            .checked_add(n)
            .and_then(|m| m.checked_mul(dim))
            .ok_or_else(|| OvcError::Corrupt("row count overflows".into()))?;
        let rows = r.f32s(count, "rows")?;
        r.finish()?;
        if embedding_fingerprint(master_seed, sigma, chunk_size, n0, n) != fingerprint {
            return Err(OvcError::FingerprintMismatch(format!(
                "{origin}: stored fingerprint does not match header fields"
            )));
        }
        Ok(Self {
            input_id,
            sigma,
            master_seed,
            chunk_size,
            n0,
            n,
            dim,
            fingerprint,
            rows,
        })
    }
}

/// Encodes all `n0 + n` noisy copies of `x` in draw order (`n0 + n` encoder calls).
pub fn build_embedding_cache(
    enc: &Encoder,
    x: &InputPoint,
    cfg: &CertConfig,
    stream: &NoiseStream,
) -> Result<EmbeddingCache> {
    cfg.validate()?;
    if stream.sigma != cfg.sigma {
        return Err(OvcError::ConfigInvalid(format!(
            "noise stream sigma {} differs from config sigma {}",
            stream.sigma, cfg.sigma
        )));
    }
    let mut rows = encode_draws(enc, x, stream, 0, 0, cfg.n0)?;
    rows.extend(encode_draws(enc, x, stream, stream.estimation_offset(cfg.n0), 0, cfg.n)?);
    Ok(EmbeddingCache {
        input_id: x.id,
        sigma: cfg.sigma,
        master_seed: stream.master_seed,
        chunk_size: stream.chunk_size,
        n0: cfg.n0,
        n: cfg.n,
        dim: enc.dim_out(),
        fingerprint: embedding_fingerprint(stream.master_seed, cfg.sigma, stream.chunk_size, cfg.n0, cfg.n),
        rows,
    })
}

pub fn write_embedding_cache(path: &Path, cache: &EmbeddingCache) -> Result<()> {
    write_atomic(path, &cache.to_bytes())
}

pub fn load_embedding_cache(path: &Path) -> Result<EmbeddingCache> {
    let data = read_file(path)?;
    EmbeddingCache::from_bytes(&data, &path.display().to_string())
}
