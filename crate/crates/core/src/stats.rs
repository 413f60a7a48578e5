//! Exact binomial confidence bounds, the Gaussian quantile function, and the
//! certified-radius formulas every certification path shares.
//!
//! Clopper-Pearson bounds are found by bisection on the regularized incomplete
//! beta function, which equals the binomial upper tail:
//! `P(Binomial(n, p) >= k) = I_p(k, n - k + 1)`.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{invalid, Result};

/// Largest probability handed to the quantile function when a bound rounds up to 1.
pub const P_CLAMP_HI: f64 = 1.0 - 1e-12;
/// Smallest probability handed to the quantile function in the two-sided formula.
pub const P_CLAMP_LO: f64 = 1e-12;

const BISECTION_TOL: f64 = 1e-14;

/// Confidence parameters of the incremental path: `alpha` for the reused
/// certificate and `alpha_zeta` for the disagreement bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub alpha_zeta: f64,
}

impl ConfidenceParams {
    pub fn new(alpha: f64, alpha_zeta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(alpha_zeta >= 0.0 && alpha_zeta < 1.0) {
            return Err(invalid(format!("alpha_zeta must lie in [0, 1), got {alpha_zeta}")));
        }
        if alpha + alpha_zeta >= 1.0 {
            return Err(invalid("alpha + alpha_zeta must be below 1"));
        }
        Ok(Self { alpha, alpha_zeta })
    }

    /// Confidence carried by certificates that spend both budgets.
    pub fn joint_confidence(&self) -> f64 {
        1.0 - self.alpha - self.alpha_zeta
    }
}

/// Outcome of a radius computation. `radius` is `None` when the certifier abstains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusResult {
    pub radius: Option<f64>,
    pub p_a_lower: f64,
    /// Set when `p_a_lower` was numerically 1 and had to be pulled back below it.
    pub clamped: bool,
}

impl RadiusResult {
    pub fn abstain(p_a_lower: f64) -> Self {
        Self {
            radius: None,
            p_a_lower,
            clamped: false,
        }
    }

    pub fn abstained(&self) -> bool {
        self.radius.is_none()
    }
}

fn check_counts(k: u64, n: u64, conf: f64) -> Result<()> {
    if n == 0 {
        return Err(invalid("trial count n must be at least 1"));
    }
    if k > n {
        return Err(invalid(format!("success count {k} exceeds trial count {n}")));
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(invalid(format!("confidence must lie in (0, 1), got {conf}")));
    }
    Ok(())
}

/// One-sided Clopper-Pearson lower bound on a binomial proportion.
///
/// Returns `L` with `P(Binomial(n, L) >= k) = 1 - conf`.
pub fn lower_conf_bound(k: u64, n: u64, conf: f64) -> Result<f64> {
    check_counts(k, n, conf)?;
    let alpha = 1.0 - conf;
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok((alpha.ln() / n as f64).exp());
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    // I_p(a, b) is increasing in p; keep `lo` on the side where the tail is below alpha.
    Ok(bisect_increasing(|p| reg_inc_beta(a, b, p), alpha))
}

/// One-sided Clopper-Pearson upper bound on a binomial proportion.
///
/// Returns `U` with `P(Binomial(n, U) <= k) = 1 - conf`.
pub fn upper_conf_bound(k: u64, n: u64, conf: f64) -> Result<f64> {
    check_counts(k, n, conf)?;
    let alpha = 1.0 - conf;
    if k == n {
        return Ok(1.0);
    }
    if k == 0 {
        return Ok(-(alpha.ln() / n as f64).exp_m1());
    }
    // P(Bin(n, U) <= k) = I_{1-U}(n - k, k + 1); solve for q = 1 - U.
    let (a, b) = (n as f64 - k as f64, k as f64 + 1.0);
    let q = bisect_increasing(|q| reg_inc_beta(a, b, q), alpha);
    Ok(1.0 - q)
}

/// Finds the largest `p` in [0, 1] (to `BISECTION_TOL`) with `f(p) <= target`
/// for a nondecreasing `f`.
fn bisect_increasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub(crate) fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 3e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function `1 - Phi(x)`, accurate in the upper tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF.
pub fn inv_std_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("quantile argument must lie in (0, 1), got {p}")));
    }
    let mut x = ppnd16(p);
    // Halley refinement against the erfc-based CDF, on whichever tail is smaller.
    for _ in 0..2 {
        let err = if p < 0.5 {
            std_normal_cdf(x) - p
        } else {
            (1.0 - p) - std_normal_sf(x)
        };
        let u = err * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Wichura's AS 241 rational approximation to the normal quantile.
#[allow(clippy::excessive_precision)]
fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    fn poly(c: &[f64; 8], r: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &ci| acc * r + ci)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive and finite, got {sigma}")));
    }
    Ok(())
}

fn clamp_upper(p: f64) -> (f64, bool) {
    if p > P_CLAMP_HI {
        warn!(p, "probability bound numerically at 1; clamping to 1 - 1e-12");
        (P_CLAMP_HI, true)
    } else {
        (p, false)
    }
}

/// Practical radius `sigma * Phi^-1(p_a_lower)`; abstains when `p_a_lower <= 1/2`.
pub fn radius_one_sided(p_a_lower: f64, sigma: f64) -> Result<RadiusResult> {
    check_sigma(sigma)?;
    if p_a_lower.is_nan() || p_a_lower < 0.0 {
        return Err(invalid(format!("p_a_lower must be a probability, got {p_a_lower}")));
    }
    if p_a_lower <= 0.5 {
        return Ok(RadiusResult::abstain(p_a_lower));
    }
    let (p, clamped) = clamp_upper(p_a_lower);
    Ok(RadiusResult {
        radius: Some(sigma * inv_std_normal_cdf(p)?),
        p_a_lower: p,
        clamped,
    })
}

/// Two-sided radius `sigma/2 * (Phi^-1(p_a) - Phi^-1(p_b))`; abstains when `p_a <= p_b`.
pub fn radius_two_sided(p_a_lower: f64, p_b_upper: f64, sigma: f64) -> Result<RadiusResult> {
    check_sigma(sigma)?;
    for (name, p) in [("p_a_lower", p_a_lower), ("p_b_upper", p_b_upper)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("{name} must be a probability, got {p}")));
        }
    }
    let (pa, clamped_a) = clamp_upper(p_a_lower);
    let pb = p_b_upper.clamp(P_CLAMP_LO, P_CLAMP_HI);
    if pa <= pb {
        return Ok(RadiusResult::abstain(pa));
    }
    let pa = pa.max(P_CLAMP_LO);
    let radius = 0.5 * sigma * (inv_std_normal_cdf(pa)? - inv_std_normal_cdf(pb)?);
    Ok(RadiusResult {
        radius: Some(radius),
        p_a_lower: pa,
        clamped: clamped_a || pb != p_b_upper,
    })
}

/// Radius of a reused certificate: `sigma * Phi^-1(p_a_lower - zeta)`.
pub fn radius_irs(p_a_lower: f64, zeta: f64, sigma: f64) -> Result<RadiusResult> {
    check_sigma(sigma)?;
    if !(0.0..=1.0).contains(&zeta) {
        return Err(invalid(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    radius_one_sided((p_a_lower - zeta).max(0.0), sigma)
}
