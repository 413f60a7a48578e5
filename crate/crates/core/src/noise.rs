//! Replayable Gaussian noise and the sampling routines shared by every
//! certification path.
//!
//! Noise is organised in chunks of `chunk_size` draws. Chunk `i` of a stream is
//! generated from a sub-seed that depends only on `(master_seed, i)`, so the
//! noise a draw sees never depends on thread count or batch split. Inside a
//! chunk, entries are produced row-major from a SplitMix64 sequence turned into
//! normals with the Box-Muller transform (cosine branch first).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OvcError, Result};
use crate::model::{Encoder, InputPoint, PromptHead};

pub const DEFAULT_CHUNK_SIZE: usize = 400;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed of chunk `chunk_index` under `master_seed`.
pub fn chunk_seed(master_seed: u64, chunk_index: u64) -> u64 {
    mix64(master_seed ^ mix64(chunk_index ^ GOLDEN_GAMMA))
}

/// Sequential SplitMix64 generator with a Box-Muller normal sampler.
#[derive(Debug, Clone)]
pub struct NormalRng {
    state: u64,
    spare: Option<f64>,
}

impl NormalRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Seeded, chunked source of isotropic Gaussian noise for one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub sigma: f64,
    pub chunk_size: usize,
}

impl NoiseStream {
    pub fn new(master_seed: u64, sigma: f64) -> Result<Self> {
        Self::with_chunk_size(master_seed, sigma, DEFAULT_CHUNK_SIZE)
    }

    pub fn with_chunk_size(master_seed: u64, sigma: f64, chunk_size: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise sigma must be positive, got {sigma}")));
        }
        if chunk_size == 0 {
            return Err(invalid("chunk_size must be at least 1"));
        }
        Ok(Self {
            master_seed,
            sigma,
            chunk_size,
        })
    }

    /// Full `chunk_size x dim` noise matrix of chunk `chunk_index`, row-major.
    pub fn gaussian_chunk(&self, chunk_index: u64, dim: usize) -> Result<Vec<f64>> {
        self.gaussian_rows(chunk_index, self.chunk_size, dim)
    }

    /// The first `rows` rows of chunk `chunk_index`.
    pub fn gaussian_rows(&self, chunk_index: u64, rows: usize, dim: usize) -> Result<Vec<f64>> {
        if dim == 0 {
            return Err(invalid("noise dimension must be at least 1"));
        }
        if rows > self.chunk_size {
            return Err(invalid(format!(
                "requested {rows} rows from a chunk of {}",
                self.chunk_size
            )));
        }
        let mut rng = NormalRng::new(chunk_seed(self.master_seed, chunk_index));
        Ok((0..rows * dim)
            .map(|_| self.sigma * rng.next_normal())
            .collect())
    }

    /// Identifies the noise seen by draws starting at `chunk_offset`.
    pub fn fingerprint(&self, chunk_offset: u64) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.master_seed);
        h.write_u64(self.sigma.to_bits());
        h.write_u64(self.chunk_size as u64);
        h.write_u64(chunk_offset);
        h.finish()
    }

    /// Number of chunks spanned by `draws` draws.
    pub fn chunks_for(&self, draws: usize) -> u64 {
        draws.div_ceil(self.chunk_size) as u64
    }

    /// Chunk offset of the estimation draw that follows an `n0`-draw selection draw.
    pub fn estimation_offset(&self, n0: usize) -> u64 {
        self.chunks_for(n0)
    }
}

/// 64-bit FNV-1a hasher; used for stream fingerprints and file checksums.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01B3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-class prediction counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ClassCounts {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![0; k],
            total: 0,
        }
    }

    pub fn from_preds(preds: &[u32], k: usize) -> Self {
        let mut out = Self::zeros(k);
        for &p in preds {
            out.counts[p as usize] += 1;
        }
        out.total = preds.len() as u64;
        out
    }

    /// Most frequent class; ties go to the lowest index.
    pub fn top(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }
}

/// Per-draw predictions in draw order, tagged with the noise they were made under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub preds: Vec<u32>,
    pub stream_fingerprint: u64,
}

impl PredictionTrace {
    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn to_counts(&self, k: usize) -> ClassCounts {
        ClassCounts::from_preds(&self.preds, k)
    }
}

/// Chunk-aligned pieces covering draws `[start, end)` as `(chunk, lo, hi)` local row ranges.
fn chunk_pieces(cs: usize, start: usize, end: usize) -> Vec<(u64, usize, usize)> {
    if start >= end {
        return Vec::new();
    }
    let first = start / cs;
    let last = (end - 1) / cs;
    (first..=last)
        .map(|c| {
            let base = c * cs;
            (c as u64, start.max(base) - base, end.min(base + cs) - base)
        })
        .collect()
}

fn check_input(enc: &Encoder, x: &InputPoint) -> Result<()> {
    if x.x.len() != enc.dim_in() {
        return Err(OvcError::DimensionMismatch {
            context: "input point",
            expected: enc.dim_in(),
            got: x.x.len(),
        });
    }
    Ok(())
}

fn encode_piece(
    enc: &Encoder,
    x: &InputPoint,
    stream: &NoiseStream,
    chunk: u64,
    lo: usize,
    hi: usize,
) -> Result<Vec<f32>> {
    let dim = enc.dim_in();
    let noise = stream.gaussian_rows(chunk, hi, dim)?;
    let mut inputs = noise[lo * dim..].to_vec();
    for row in inputs.chunks_exact_mut(dim) {
        for (v, &xi) in row.iter_mut().zip(&x.x) {
            *v += xi;
        }
    }
    enc.encode_batch(&inputs, hi - lo)
}

/// Embeddings of draws `[start, end)` of the draw sequence beginning at
/// `chunk_offset`, row-major `(end - start) x D`. Performs `end - start` encoder calls.
pub fn encode_draws(
    enc: &Encoder,
    x: &InputPoint,
    stream: &NoiseStream,
    chunk_offset: u64,
    start: usize,
    end: usize,
) -> Result<Vec<f32>> {
    check_input(enc, x)?;
    enc.check_live()?;
    let pieces = chunk_pieces(stream.chunk_size, start, end);
    let parts = pieces
        .par_iter()
        .map(|&(c, lo, hi)| encode_piece(enc, x, stream, chunk_offset + c, lo, hi))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Predictions for draws `[start, end)`; same noise as [`encode_draws`].
pub fn predict_draws(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    stream: &NoiseStream,
    chunk_offset: u64,
    start: usize,
    end: usize,
) -> Result<Vec<u32>> {
    check_input(enc, x)?;
    enc.check_live()?;
    head.check_dim(enc.dim_out())?;
    let pieces = chunk_pieces(stream.chunk_size, start, end);
    let parts = pieces
        .par_iter()
        .map(|&(c, lo, hi)| {
            let emb = encode_piece(enc, x, stream, chunk_offset + c, lo, hi)?;
            Ok(head.predict_rows(&emb))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Class counts of `n` noisy predictions drawn from chunks starting at `chunk_offset`.
pub fn sample_under_noise(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    n: usize,
    stream: &NoiseStream,
    chunk_offset: u64,
) -> Result<ClassCounts> {
    if n == 0 {
        return Err(invalid("sample count n must be at least 1"));
    }
    let preds = predict_draws(enc, head, x, stream, chunk_offset, 0, n)?;
    Ok(ClassCounts::from_preds(&preds, head.num_classes()))
}

/// Per-draw predictions of `n` noisy copies of `x`, in draw order.
pub fn pred_under_noise(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    n: usize,
    stream: &NoiseStream,
    chunk_offset: u64,
) -> Result<PredictionTrace> {
    if n == 0 {
        return Err(invalid("sample count n must be at least 1"));
    }
    Ok(PredictionTrace {
        preds: predict_draws(enc, head, x, stream, chunk_offset, 0, n)?,
        stream_fingerprint: stream.fingerprint(chunk_offset),
    })
}

/// Selection and estimation counts from precomputed embeddings: rows `[0, n0)`
/// and `[n0, n0 + n)`. Performs no encoder calls.
pub fn count_prediction(
    emb_rows: &[f32],
    head: &PromptHead,
    n0: usize,
    n: usize,
) -> Result<(ClassCounts, ClassCounts)> {
    if n0 == 0 || n == 0 {
        return Err(invalid("count_prediction needs n0 >= 1 and n >= 1"));
    }
    let d = head.dim();
    if emb_rows.len() != (n0 + n) * d {
        return Err(OvcError::DimensionMismatch {
            context: "cached embedding rows",
            expected: n0 + n,
            got: emb_rows.len() / d.max(1),
        });
    }
    let (sel, est) = emb_rows.split_at(n0 * d);
    let k = head.num_classes();
    Ok((
        ClassCounts::from_preds(&head.predict_rows(sel), k),
        ClassCounts::from_preds(&head.predict_rows(est), k),
    ))
}
