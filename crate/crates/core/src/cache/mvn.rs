//! Gaussian approximation of an input's embedding distribution.

use std::path::Path;

use super::{read_file, write_atomic, BinReader, BinWriter};
use crate::error::{OvcError, Result};
use crate::model::PromptHead;
use crate::noise::NoiseStream;

const MAGIC: &[u8; 4] = b"OVCM";
const JITTER_START: f64 = 1e-6;
const JITTER_CAP: f64 = 1e-2;
/// Starting jitter when the covariance has zero trace.
const JITTER_FLOOR: f64 = 1e-12;

/// Mean and covariance of a multivariate normal, either in embedding space
/// (`dim = D`) or, after [`transform_mvn`], in logit space (`dim = K`).
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub input_id: u64,
    pub sigma: f64,
    pub dim: usize,
    pub mu: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub fit_sample_count: u64,
    pub jitter_applied: f64,
}

impl MvnParams {
    pub fn new(mu: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mu.len();
        if cov.len() != dim * dim {
            return Err(OvcError::DimensionMismatch {
                context: "covariance",
                expected: dim * dim,
                got: cov.len(),
            });
        }
        Ok(Self {
            input_id: 0,
            sigma: 0.0,
            dim,
            mu,
            cov,
            fit_sample_count: 0,
            jitter_applied: 0.0,
        })
    }

    pub fn for_input(mut self, input_id: u64, sigma: f64) -> Self {
        self.input_id = input_id;
        self.sigma = sigma;
        self
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.cov[i * self.dim + i]).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in 0..i {
                worst = worst.max((self.cov[i * d + j] - self.cov[j * d + i]).abs());
            }
        }
        worst
    }

    pub fn file_len(&self) -> usize {
        Self::encoded_len(self.dim)
    }

    /// Size of an `OVCM` file for dimension `dim`.
    pub fn encoded_len(dim: usize) -> usize {
        4 + 4 + 8 + 8 + 4 + 8 + 8 + 4 * (dim + dim * dim) + 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.u64(self.input_id)
            .f64(self.sigma)
            .u32(self.dim as u32)
            .u64(self.fit_sample_count)
            .f64(self.jitter_applied)
            .f32s(self.mu.iter().map(|&v| v as f32))
            .f32s(self.cov.iter().map(|&v| v as f32));
        w.finish()
    }

    pub fn from_bytes(data: &[u8], origin: &str) -> Result<Self> {
        let mut r = BinReader::open(data, MAGIC, origin)?;
        let input_id = r.u64("input_id")?;
        let sigma = r.f64("sigma")?;
        let dim = r.u32("dim")? as usize;
        let fit_sample_count = r.u64("fit_sample_count")?;
        let jitter_applied = r.f64("jitter_applied")?;
        let mu = r.f32s(dim, "mu")?;
        let cov = r
            .f32s(dim.checked_mul(dim).ok_or_else(|| OvcError::Corrupt("dim overflows".into()))?, "cov")?;
        r.finish()?;
        Ok(Self {
            input_id,
            sigma,
            dim,
            mu: mu.into_iter().map(f64::from).collect(),
            cov: cov.into_iter().map(f64::from).collect(),
            fit_sample_count,
            jitter_applied,
        })
    }
}

/// Lower Cholesky factor of a row-major `n x n` matrix, or `None` if a pivot
/// is not positive relative to rounding error (`n * eps * a_ii`).
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > n as f64 * f64::EPSILON * a[i * n + i].abs()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Cholesky factor of `a + jitter * I`, escalating jitter from `1e-6 * trace / n`
/// by doubling until the factorization succeeds or jitter exceeds `1e-2 * trace`.
///
/// Returns the factor and the jitter used. A zero-trace matrix factors to zero.
pub fn cholesky_with_jitter(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    if trace == 0.0 && a.iter().all(|&v| v == 0.0) {
        return Ok((vec![0.0; n * n], 0.0));
    }
    if let Some(l) = cholesky(a, n) {
        return Ok((l, 0.0));
    }
    let cap = JITTER_CAP * trace.abs();
    let mut jitter = (JITTER_START * trace / n as f64).max(JITTER_FLOOR);
    let mut work = a.to_vec();
    loop {
        for i in 0..n {
            work[i * n + i] = a[i * n + i] + jitter;
        }
        if let Some(l) = cholesky(&work, n) {
            return Ok((l, jitter));
        }
        jitter *= 2.0;
        if jitter > cap {
            return Err(OvcError::NonPsd { jitter });
        }
    }
}

/// Column mean and unbiased sample covariance of `m x dim` rows.
///
/// Parameters are rounded to `f32` (the storage precision) before the
/// positive-definiteness check, and jitter is escalated if that check fails;
/// the stored covariance stays unjittered, with the jitter recorded.
pub fn fit_mvn(rows: &[f32], dim: usize) -> Result<MvnParams> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(OvcError::DimensionMismatch {
            context: "fit_mvn rows",
            expected: dim,
            got: rows.len(),
        });
    }
    let m = rows.len() / dim;
    if m < 2 {
        return Err(OvcError::InsufficientSamples { needed: 2, got: m });
    }
    let mut mu = vec![0.0_f64; dim];
    for row in rows.chunks_exact(dim) {
        for (acc, &v) in mu.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    for v in &mut mu {
        *v /= m as f64;
    }
    let mut cov = vec![0.0_f64; dim * dim];
    let mut centered = vec![0.0_f64; dim];
    for row in rows.chunks_exact(dim) {
        for ((c, &v), &mean) in centered.iter_mut().zip(row).zip(&mu) {
            *c = v as f64 - mean;
        }
        for i in 0..dim {
            let ci = centered[i];
            let out = &mut cov[i * dim..i * dim + i + 1];
            for (o, &cj) in out.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let denom = (m - 1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = (cov[i * dim + j] / denom) as f32 as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let mu: Vec<f64> = mu.into_iter().map(|v| v as f32 as f64).collect();
    let (_, jitter) = cholesky_with_jitter(&cov, dim)?;
    // A zero covariance factors trivially but still needs regularization to be a density.
    let jitter = if jitter == 0.0 && cov.iter().all(|&v| v == 0.0) {
        JITTER_FLOOR
    } else {
        jitter
    };
    Ok(MvnParams {
        input_id: 0,
        sigma: 0.0,
        dim,
        mu,
        cov,
        fit_sample_count: m as u64,
        jitter_applied: jitter,
    })
}

/// Pushes `N(mu, Sigma)` through the prompt head: `N(P mu, P Sigma P^T)`.
pub fn transform_mvn(head: &PromptHead, mvn: &MvnParams) -> Result<MvnParams> {
    let (k, d) = (head.num_classes(), head.dim());
    if mvn.dim != d {
        return Err(OvcError::DimensionMismatch {
            context: "transform_mvn",
            expected: d,
            got: mvn.dim,
        });
    }
    let p: Vec<f64> = head.rows().iter().map(|&v| v as f64).collect();
    let mean: Vec<f64> = p
        .chunks_exact(d)
        .map(|row| row.iter().zip(&mvn.mu).map(|(a, b)| a * b).sum())
        .collect();
    // tmp = P * Sigma (K x D)
    let mut tmp = vec![0.0; k * d];
    for (i, prow) in p.chunks_exact(d).enumerate() {
        let out = &mut tmp[i * d..(i + 1) * d];
        for (l, &pl) in prow.iter().enumerate() {
            if pl == 0.0 {
                continue;
            }
            let srow = &mvn.cov[l * d..(l + 1) * d];
            for (o, &s) in out.iter_mut().zip(srow) {
                *o += pl * s;
            }
        }
    }
    let mut cov = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cov[i * k + j] = tmp[i * d..(i + 1) * d]
                .iter()
                .zip(&p[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    for i in 0..k {
        for j in 0..i {
            let s = 0.5 * (cov[i * k + j] + cov[j * k + i]);
            cov[i * k + j] = s;
            cov[j * k + i] = s;
        }
    }
    Ok(MvnParams {
        input_id: mvn.input_id,
        sigma: mvn.sigma,
        dim: k,
        mu: mean,
        cov,
        fit_sample_count: mvn.fit_sample_count,
        jitter_applied: 0.0,
    })
}

/// `count` draws `mu + L z` with `z` from the seeded chunked noise stream; row-major `count x dim`.
pub fn sample_mvn(mvn: &MvnParams, count: usize, seed: u64) -> Result<Vec<f64>> {
    let d = mvn.dim;
    let (l, _) = cholesky_with_jitter(&mvn.cov, d)?;
    let stream = NoiseStream::new(seed, 1.0)?;
    let mut out = Vec::with_capacity(count * d);
    let mut remaining = count;
    let mut chunk = 0;
    while remaining > 0 {
        let rows = remaining.min(stream.chunk_size);
        let z = stream.gaussian_rows(chunk, rows, d)?;
        for zr in z.chunks_exact(d) {
            for i in 0..d {
                let lrow = &l[i * d..i * d + i + 1];
                let s: f64 = lrow.iter().zip(zr).map(|(a, b)| a * b).sum();
                out.push(mvn.mu[i] + s);
            }
        }
        remaining -= rows;
        chunk += 1;
    }
    Ok(out)
}

pub fn write_mvn(path: &Path, mvn: &MvnParams) -> Result<()> {
    write_atomic(path, &mvn.to_bytes())
}

pub fn load_mvn(path: &Path) -> Result<MvnParams> {
    let data = read_file(path)?;
    MvnParams::from_bytes(&data, &path.display().to_string())
}
