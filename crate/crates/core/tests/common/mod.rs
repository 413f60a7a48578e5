//! Independent reference implementations used as test oracles, plus small
//! fixtures. Nothing here calls into the numerical code under test.
#![allow(dead_code)]

use ovc_core::model::{make_synthetic_family, Encoder, InputPoint, PromptHead, SyntheticSpec};

// ---------------------------------------------------------------- binomial

/// `ln(i!)` for `i = 0..=n`, by direct summation of logs.
pub fn ln_factorials(n: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0_f64;
    t.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        t.push(acc);
    }
    t
}

fn ln_pmf(i: u64, n: u64, p: f64, lf: &[f64]) -> f64 {
    let lc = lf[n as usize] - lf[i as usize] - lf[(n - i) as usize];
    let a = if i == 0 { 0.0 } else { i as f64 * p.ln() };
    let b = if i == n { 0.0 } else { (n - i) as f64 * (-p).ln_1p() };
    lc + a + b
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, summing pmf terms from the top.
pub fn binom_sf(k: u64, n: u64, p: f64, lf: &[f64]) -> f64 {
    if k == 0 {
        return 1.0;
    }
    (k..=n).rev().map(|i| ln_pmf(i, n, p, lf).exp()).sum()
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`.
pub fn binom_cdf(k: u64, n: u64, p: f64, lf: &[f64]) -> f64 {
    if k >= n {
        return 1.0;
    }
    (0..=k).map(|i| ln_pmf(i, n, p, lf).exp()).sum()
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> bool) -> f64 {
    // f(lo) == false, f(hi) == true; returns the crossing point.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-sided lower bound: the `p` at which `P(X >= k) = alpha`.
pub fn oracle_lower(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let lf = ln_factorials(n);
    bisect(0.0, 1.0, |p| binom_sf(k, n, p, &lf) >= alpha)
}

/// One-sided upper bound: the `p` at which `P(X <= k) = alpha`.
pub fn oracle_upper(k: u64, n: u64, alpha: f64) -> f64 {
    if k == n {
        return 1.0;
    }
    let lf = ln_factorials(n);
    bisect(0.0, 1.0, |p| binom_cdf(k, n, p, &lf) <= alpha)
}

// ---------------------------------------------------------------- normal

/// `erfc(x)` for `x >= 0`: Maclaurin series for `erf` below 1.5, continued
/// fraction above.
pub fn erfc_pos(x: f64) -> f64 {
    assert!(x >= 0.0);
    if x < 1.5 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        1.0 - sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        let mut t = x;
        for m in (1..=2000).rev() {
            t = x + (m as f64 / 2.0) / t;
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / t
    }
}

pub fn oracle_phi(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    if x <= 0.0 {
        0.5 * erfc_pos(-x)
    } else {
        1.0 - 0.5 * erfc_pos(x)
    }
}

/// Quantile by bisection on the series/continued-fraction CDF.
pub fn oracle_phi_inv(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    if p < 0.5 {
        bisect(-40.0, 0.0, |z| oracle_phi(z) >= p)
    } else {
        -bisect(-40.0, 0.0, |z| oracle_phi(z) >= 1.0 - p)
    }
}

// ---------------------------------------------------------------- noise

/// From-scratch reimplementation of the documented noise scheme:
/// SplitMix64 finalizer, chunk sub-seed `mix(master ^ mix(idx ^ golden))`,
/// sequential SplitMix64 inside the chunk, 53-bit midpoint uniforms, and
/// Box-Muller emitting the cosine branch first.
pub struct RefNoise {
    pub master_seed: u64,
    pub sigma: f64,
    pub chunk_size: usize,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn ref_mix(z: u64) -> u64 {
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RefNoise {
    /// Noise vector of draw `j` (counted from `chunk_offset`).
    pub fn draw(&self, chunk_offset: u64, j: usize, dim: usize) -> Vec<f64> {
        let chunk = chunk_offset + (j / self.chunk_size) as u64;
        let row = j % self.chunk_size;
        let mut state = ref_mix(self.master_seed ^ ref_mix(chunk ^ GOLDEN));
        let mut next = || {
            state = state.wrapping_add(GOLDEN);
            let u = ref_mix(state) >> 11;
            (u as f64 + 0.5) / 9007199254740992.0
        };
        let needed = (row + 1) * dim;
        let mut out = Vec::with_capacity(needed + 1);
        while out.len() < needed {
            let u1 = next();
            let u2 = next();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            out.push(r * th.cos());
            out.push(r * th.sin());
        }
        out[row * dim..needed].iter().map(|z| self.sigma * z).collect()
    }
}

/// Argmax of `P e` by a plain loop (first maximum wins).
pub fn ref_predict(head: &PromptHead, emb: &[f32]) -> usize {
    let d = head.dim();
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..head.num_classes() {
        let mut v = 0.0_f64;
        for i in 0..d {
            v += head.rows()[c * d + i] as f64 * emb[i] as f64;
        }
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Brute-force noisy predictions: one encoder call per draw.
pub fn ref_predictions(
    enc: &Encoder,
    head: &PromptHead,
    x: &[f64],
    noise: &RefNoise,
    chunk_offset: u64,
    n: usize,
) -> Vec<usize> {
    (0..n)
        .map(|j| {
            let eps = noise.draw(chunk_offset, j, x.len());
            let xn: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| a + b).collect();
            ref_predict(head, &enc.encode(&xn).unwrap())
        })
        .collect()
}

pub fn histogram(preds: &[usize], k: usize) -> Vec<u64> {
    let mut h = vec![0; k];
    for &p in preds {
        h[p] += 1;
    }
    h
}

// ---------------------------------------------------------------- fixtures

pub struct Desk {
    pub encoder: Encoder,
    pub family: Vec<PromptHead>,
    pub inputs: Vec<InputPoint>,
}

/// Desk-scale model: 32-dim inputs, tanh encoder to `d`, `k` classes.
pub fn desk(seed: u64, n_inputs: usize, n_prompts: usize, k: usize, d: usize, jitter: f64) -> Desk {
    let encoder = Encoder::synthetic(SyntheticSpec::desk(32, d, seed ^ 0x51)).unwrap();
    let family = make_synthetic_family(seed, n_prompts, k, d, jitter).unwrap();
    let mut rng = ovc_core::noise::NormalRng::new(seed ^ 0xD5);
    let inputs = (0..n_inputs as u64)
        .map(|id| InputPoint::new(id, (0..32).map(|_| rng.next_normal()).collect()).unwrap())
        .collect();
    Desk {
        encoder,
        family,
        inputs,
    }
}

/// Simple seeded uniform source for test-side sampling.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 + 0.5) / 9007199254740992.0
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
