//! Certification algorithms: standard randomized smoothing, Modified-IRS
//! (reusing a known prompt's certificate), cached OVC (replaying stored
//! embeddings), MVN-OVC (sampling logits from a fitted Gaussian), and the
//! plain IRS skeleton kept for regression.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{sample_mvn, transform_mvn, CertMetaCache, EmbeddingCache, MvnParams};
use crate::error::{OvcError, Result};
use crate::model::{argmax, Encoder, InputPoint, PromptHead};
use crate::noise::{count_prediction, pred_under_noise, predict_draws, ClassCounts, NoiseStream, PredictionTrace};
use crate::stats::{lower_conf_bound, radius_irs, radius_one_sided, upper_conf_bound, ConfidenceParams, RadiusResult};

/// Multiplier MVN-OVC applies to its lower bound on `p_A`.
pub const MVN_PA_SCALE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    pub sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub n_p: usize,
    pub alpha: f64,
    pub alpha_zeta: f64,
    pub gamma: f64,
}

impl CertConfig {
    /// Full-scale sample sizes: `n0 = 100`, `n = 100_000`, `n_p = 10_000`.
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            n0: 100,
            n: 100_000,
            n_p: 10_000,
            alpha: 0.001,
            alpha_zeta: 0.001,
            gamma: 0.01,
        }
    }

    /// Desk-scale defaults: as [`CertConfig::new`] with `n = 10_000`.
    pub fn desk(sigma: f64) -> Self {
        Self {
            n: 10_000,
            ..Self::new(sigma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OvcError::ConfigInvalid(m));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n0 == 0 || self.n == 0 || self.n_p == 0 {
            return bad("n0, n and n_p must all be at least 1".into());
        }
        if self.n_p > self.n {
            return bad(format!("n_p ({}) must not exceed n ({})", self.n_p, self.n));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        ConfidenceParams::new(self.alpha, self.alpha_zeta).map_err(|e| OvcError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    pub fn confidence_params(&self) -> ConfidenceParams {
        ConfidenceParams {
            alpha: self.alpha,
            alpha_zeta: self.alpha_zeta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Standard,
    ModifiedIrsFast,
    ModifiedIrsFallback,
    Ovc,
    MvnOvc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Standard => "STANDARD",
            Method::ModifiedIrsFast => "MODIFIED_IRS_FAST",
            Method::ModifiedIrsFallback => "MODIFIED_IRS_FALLBACK",
            Method::Ovc => "OVC",
            Method::MvnOvc => "MVN_OVC",
        }
    }
}

/// The known prompt a novel prompt was matched to on the incremental path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrsMatch {
    pub sim_prompt_id: String,
    pub disagreement_count: u64,
    pub n_p: u64,
    pub zeta_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub input_id: u64,
    pub prompt_id: String,
    /// `None` means ABSTAIN.
    pub predicted_class: Option<usize>,
    pub radius: Option<f64>,
    pub p_a_lower: f64,
    pub confidence: f64,
    pub method: Method,
    /// Set for MVN-OVC: the radius is an estimate, not a sound certificate.
    pub heuristic: bool,
    pub samples_used: u64,
    pub encoder_calls: u64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irs_match: Option<IrsMatch>,
}

impl Certificate {
    pub fn abstained(&self) -> bool {
        self.predicted_class.is_none()
    }

    /// Same class, abstain flag, radius and `p_A` bit for bit.
    pub fn same_outcome(&self, other: &Certificate) -> bool {
        self.predicted_class == other.predicted_class
            && self.radius.map(f64::to_bits) == other.radius.map(f64::to_bits)
            && self.p_a_lower.to_bits() == other.p_a_lower.to_bits()
    }
}

struct Decision {
    class: Option<usize>,
    radius: RadiusResult,
}

/// Top class from the selection counts, Clopper-Pearson bound from the
/// estimation counts, optionally scaled, then the one-sided radius rule.
fn decide(counts0: &ClassCounts, counts: &ClassCounts, alpha: f64, sigma: f64, pa_scale: f64) -> Result<Decision> {
    let c_hat = counts0.top();
    let p_a = lower_conf_bound(counts.counts[c_hat], counts.total, 1.0 - alpha)? * pa_scale;
    let radius = radius_one_sided(p_a, sigma)?;
    Ok(Decision {
        class: (!radius.abstained()).then_some(c_hat),
        radius,
    })
}

fn check_stream(cfg: &CertConfig, stream: &NoiseStream) -> Result<()> {
    if stream.sigma != cfg.sigma {
        return Err(OvcError::ConfigInvalid(format!(
            "noise stream sigma {} differs from config sigma {}",
            stream.sigma, cfg.sigma
        )));
    }
    Ok(())
}

/// Standard certification at confidence `1 - alpha`. When `prefix` is given it
/// supplies the first predictions of the estimation draw (same noise), so only
/// the remainder is evaluated.
#[allow(clippy::too_many_arguments)]
fn run_standard(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    stream: &NoiseStream,
    alpha: f64,
    prefix: Option<&PredictionTrace>,
    started: Instant,
) -> Result<(Certificate, PredictionTrace)> {
    let k = head.num_classes();
    let sel = predict_draws(enc, head, x, stream, 0, 0, cfg.n0)?;
    let offset = stream.estimation_offset(cfg.n0);
    let fingerprint = stream.fingerprint(offset);
    let mut est = Vec::with_capacity(cfg.n);
    if let Some(p) = prefix {
        if p.stream_fingerprint != fingerprint {
            return Err(OvcError::FingerprintMismatch(
                "reused predictions come from a different noise stream".into(),
            ));
        }
        est.extend_from_slice(&p.preds[..p.len().min(cfg.n)]);
    }
    let reused = est.len();
    est.extend(predict_draws(enc, head, x, stream, offset, reused, cfg.n)?);
    let counts0 = ClassCounts::from_preds(&sel, k);
    let counts = ClassCounts::from_preds(&est, k);
    let d = decide(&counts0, &counts, alpha, cfg.sigma, 1.0)?;
    let cert = Certificate {
        input_id: x.id,
        prompt_id: head.prompt_id().to_string(),
        predicted_class: d.class,
        radius: d.radius.radius,
        p_a_lower: d.radius.p_a_lower,
        confidence: 1.0 - alpha,
        method: Method::Standard,
        heuristic: false,
        samples_used: (cfg.n0 + cfg.n) as u64,
        encoder_calls: (cfg.n0 + cfg.n - reused) as u64,
        wall_time: started.elapsed().as_secs_f64(),
        irs_match: None,
    };
    Ok((
        cert,
        PredictionTrace {
            preds: est,
            stream_fingerprint: fingerprint,
        },
    ))
}

/// Standard randomized-smoothing certification (`n0 + n` encoder calls).
pub fn certify_standard(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    stream: &NoiseStream,
) -> Result<Certificate> {
    Ok(certify_standard_traced(enc, head, x, cfg, stream)?.0)
}

/// [`certify_standard`], also returning the estimation-draw predictions for
/// recording into a [`CertMetaCache`].
pub fn certify_standard_traced(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    stream: &NoiseStream,
) -> Result<(Certificate, PredictionTrace)> {
    let started = Instant::now();
    cfg.validate()?;
    check_stream(cfg, stream)?;
    run_standard(enc, head, x, cfg, stream, cfg.alpha, None, started)
}

/// Certifies `head` for a known prompt and records its trace, `p_A` and class in `meta`.
pub fn certify_and_record(
    enc: &Encoder,
    head: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    meta: &mut CertMetaCache,
) -> Result<Certificate> {
    let stream = meta.stream()?;
    let (cert, trace) = certify_standard_traced(enc, head, x, cfg, &stream)?;
    let c_a = cert.predicted_class.unwrap_or_else(|| trace.to_counts(head.num_classes()).top());
    meta.record(head.prompt_id(), &trace, cfg.n_p, cert.p_a_lower, c_a)?;
    Ok(cert)
}

/// Upper confidence bound on the probability that two prompts disagree under the shared noise.
pub fn estimate_zeta(
    trace_novel: &PredictionTrace,
    trace_known: &PredictionTrace,
    n_p: usize,
    alpha_zeta: f64,
) -> Result<f64> {
    if trace_novel.stream_fingerprint != trace_known.stream_fingerprint {
        return Err(OvcError::FingerprintMismatch(
            "prediction traces were drawn from different noise".into(),
        ));
    }
    if n_p == 0 || trace_novel.len() < n_p || trace_known.len() < n_p {
        return Err(OvcError::ConfigInvalid(format!(
            "traces of length {} and {} cannot cover n_p = {n_p}",
            trace_novel.len(),
            trace_known.len()
        )));
    }
    let diff = disagreements(&trace_novel.preds, &trace_known.preds, n_p);
    upper_conf_bound(diff, n_p as u64, 1.0 - alpha_zeta)
}

fn disagreements(a: &[u32], b: &[u32], n_p: usize) -> u64 {
    a[..n_p].iter().zip(&b[..n_p]).filter(|(x, y)| x != y).count() as u64
}

fn check_meta(x: &InputPoint, cfg: &CertConfig, meta: &CertMetaCache) -> Result<NoiseStream> {
    if meta.is_empty() {
        return Err(OvcError::EmptyCache);
    }
    if meta.input_id != x.id {
        return Err(OvcError::SeedMismatch(format!(
            "metadata belongs to input {}, not {}",
            meta.input_id, x.id
        )));
    }
    if meta.sigma != cfg.sigma {
        return Err(OvcError::SeedMismatch(format!(
            "metadata recorded at sigma {}, config sigma {}",
            meta.sigma, cfg.sigma
        )));
    }
    let stream = meta.stream()?;
    if meta.trace_chunk_offset != stream.estimation_offset(cfg.n0) {
        return Err(OvcError::SeedMismatch(format!(
            "traces start at chunk {}, but n0 = {} puts the estimation draw at chunk {}",
            meta.trace_chunk_offset,
            cfg.n0,
            stream.estimation_offset(cfg.n0)
        )));
    }
    if let Some((id, e)) = meta.entries.iter().find(|(_, e)| e.trace.len() < cfg.n_p) {
        return Err(OvcError::ConfigInvalid(format!(
            "cached trace for {id} has {} predictions, need n_p = {}",
            e.trace.len(),
            cfg.n_p
        )));
    }
    Ok(stream)
}

/// Modified-IRS: reuse the certificate of the known prompt whose predictions
/// agree most with the novel prompt on the replayed noise, or fall back to a
/// full certification at confidence `1 - alpha - alpha_zeta`.
pub fn certify_modified_irs(
    enc: &Encoder,
    head_novel: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    meta: &CertMetaCache,
) -> Result<Certificate> {
    let started = Instant::now();
    cfg.validate()?;
    let stream = check_meta(x, cfg, meta)?;
    let offset = meta.trace_chunk_offset;
    let novel = pred_under_noise(enc, head_novel, x, cfg.n_p, &stream, offset)?;

    // BTreeMap order makes the lowest prompt id win ties.
    let (sim_id, sim) = meta
        .entries
        .iter()
        .map(|(id, e)| (id, e, disagreements(&novel.preds, &e.trace, cfg.n_p)))
        .fold(None::<(&String, &crate::cache::MetaEntry, u64)>, |best, cand| match best {
            Some(b) if b.2 <= cand.2 => Some(b),
            _ => Some(cand),
        })
        .map(|(id, e, _)| (id, e))
        .expect("metadata checked nonempty");
    let diff = disagreements(&novel.preds, &sim.trace, cfg.n_p);
    let joint = cfg.confidence_params().joint_confidence();

    if diff as f64 / cfg.n_p as f64 > cfg.gamma {
        let (mut cert, _) = run_standard(
            enc,
            head_novel,
            x,
            cfg,
            &stream,
            cfg.alpha + cfg.alpha_zeta,
            Some(&novel),
            started,
        )?;
        cert.method = Method::ModifiedIrsFallback;
        cert.confidence = joint;
        cert.encoder_calls += cfg.n_p as u64;
        cert.wall_time = started.elapsed().as_secs_f64();
        return Ok(cert);
    }

    let known = PredictionTrace {
        preds: sim.trace.clone(),
        stream_fingerprint: novel.stream_fingerprint,
    };
    let zeta = estimate_zeta(&novel, &known, cfg.n_p, cfg.alpha_zeta)?;
    let r = radius_irs(sim.p_a_lower, zeta, cfg.sigma)?;
    Ok(Certificate {
        input_id: x.id,
        prompt_id: head_novel.prompt_id().to_string(),
        predicted_class: (!r.abstained()).then_some(sim.c_a as usize),
        radius: r.radius,
        p_a_lower: sim.p_a_lower,
        confidence: joint,
        method: Method::ModifiedIrsFast,
        heuristic: false,
        samples_used: cfg.n_p as u64,
        encoder_calls: cfg.n_p as u64,
        wall_time: started.elapsed().as_secs_f64(),
        irs_match: Some(IrsMatch {
            sim_prompt_id: sim_id.clone(),
            disagreement_count: diff,
            n_p: cfg.n_p as u64,
            zeta_x: zeta,
        }),
    })
}

/// Plain IRS with a single base model: if the cached `p_A` is below
/// `p_a_threshold`, bound the disagreement and reuse the certificate;
/// otherwise re-estimate `p_A` from `n_p` replayed draws at confidence
/// `1 - (alpha + alpha_zeta)`.
pub fn certify_irs_base(
    enc: &Encoder,
    head_approx: &PromptHead,
    x: &InputPoint,
    cfg: &CertConfig,
    meta: &CertMetaCache,
    base_prompt_id: &str,
    p_a_threshold: f64,
) -> Result<Certificate> {
    let started = Instant::now();
    cfg.validate()?;
    let stream = check_meta(x, cfg, meta)?;
    let base = meta
        .entries
        .get(base_prompt_id)
        .ok_or_else(|| OvcError::ConfigInvalid(format!("no cached entry for base prompt {base_prompt_id}")))?;
    let c_hat = base.c_a as usize;
    let offset = meta.trace_chunk_offset;
    let joint = cfg.confidence_params().joint_confidence();
    let novel = pred_under_noise(enc, head_approx, x, cfg.n_p, &stream, offset)?;

    let mut cert = Certificate {
        input_id: x.id,
        prompt_id: head_approx.prompt_id().to_string(),
        predicted_class: None,
        radius: None,
        p_a_lower: base.p_a_lower,
        confidence: joint,
        method: Method::ModifiedIrsFast,
        heuristic: false,
        samples_used: cfg.n_p as u64,
        encoder_calls: cfg.n_p as u64,
        wall_time: 0.0,
        irs_match: None,
    };
    if base.p_a_lower < p_a_threshold {
        let known = PredictionTrace {
            preds: base.trace.clone(),
            stream_fingerprint: novel.stream_fingerprint,
        };
        let zeta = estimate_zeta(&novel, &known, cfg.n_p, cfg.alpha_zeta)?;
        let r = radius_irs(base.p_a_lower, zeta, cfg.sigma)?;
        cert.predicted_class = (!r.abstained()).then_some(c_hat);
        cert.radius = r.radius;
        cert.irs_match = Some(IrsMatch {
            sim_prompt_id: base_prompt_id.to_string(),
            disagreement_count: disagreements(&novel.preds, &base.trace, cfg.n_p),
            n_p: cfg.n_p as u64,
            zeta_x: zeta,
        });
    } else {
        let counts = novel.to_counts(head_approx.num_classes());
        let p = lower_conf_bound(counts.counts[c_hat], cfg.n_p as u64, joint)?;
        let r = radius_one_sided(p, cfg.sigma)?;
        cert.method = Method::ModifiedIrsFallback;
        cert.p_a_lower = r.p_a_lower;
        cert.predicted_class = (!r.abstained()).then_some(c_hat);
        cert.radius = r.radius;
    }
    cert.wall_time = started.elapsed().as_secs_f64();
    Ok(cert)
}

/// Cached OVC: the standard decision rule on stored embeddings. No encoder calls;
/// identical to [`certify_standard`] under the stream the cache was built with.
pub fn certify_ovc(head_novel: &PromptHead, x_id: u64, cfg: &CertConfig, cache: &EmbeddingCache) -> Result<Certificate> {
    Ok(certify_ovc_traced(head_novel, x_id, cfg, cache)?.0)
}

/// [`certify_ovc`], also returning the estimation-draw predictions.
pub fn certify_ovc_traced(
    head_novel: &PromptHead,
    x_id: u64,
    cfg: &CertConfig,
    cache: &EmbeddingCache,
) -> Result<(Certificate, PredictionTrace)> {
    let started = Instant::now();
    cfg.validate()?;
    cache.check_compatible(x_id, cfg)?;
    head_novel.check_dim(cache.dim)?;
    let k = head_novel.num_classes();
    let sel = head_novel.predict_rows(cache.selection_rows());
    let est = head_novel.predict_rows(cache.estimation_rows());
    let counts0 = ClassCounts::from_preds(&sel, k);
    let counts = ClassCounts::from_preds(&est, k);
    let d = decide(&counts0, &counts, cfg.alpha, cfg.sigma, 1.0)?;
    let stream = NoiseStream::with_chunk_size(cache.master_seed, cache.sigma, cache.chunk_size)?;
    let cert = Certificate {
        input_id: x_id,
        prompt_id: head_novel.prompt_id().to_string(),
        predicted_class: d.class,
        radius: d.radius.radius,
        p_a_lower: d.radius.p_a_lower,
        confidence: 1.0 - cfg.alpha,
        method: Method::Ovc,
        heuristic: false,
        samples_used: (cfg.n0 + cfg.n) as u64,
        encoder_calls: 0,
        wall_time: started.elapsed().as_secs_f64(),
        irs_match: None,
    };
    Ok((
        cert,
        PredictionTrace {
            preds: est,
            stream_fingerprint: stream.fingerprint(stream.estimation_offset(cfg.n0)),
        },
    ))
}

/// Selection and estimation counts straight from an embedding cache.
pub fn cached_counts(head: &PromptHead, cache: &EmbeddingCache) -> Result<(ClassCounts, ClassCounts)> {
    count_prediction(&cache.rows, head, cache.n0, cache.n)
}

/// MVN-OVC: sample `n0 + n` logit vectors from `N(P mu, P Sigma P^T)`, apply
/// the standard decision rule, and scale the `p_A` bound by 0.99. The result
/// is marked heuristic.
pub fn certify_mvn_ovc(
    head_novel: &PromptHead,
    x_id: u64,
    cfg: &CertConfig,
    mvn: &MvnParams,
    sample_seed: u64,
) -> Result<Certificate> {
    let started = Instant::now();
    cfg.validate()?;
    if mvn.input_id != x_id {
        return Err(OvcError::MvnMissing(x_id));
    }
    if mvn.sigma != cfg.sigma {
        return Err(OvcError::FingerprintMismatch(format!(
            "MVN fitted at sigma {}, config sigma {}",
            mvn.sigma, cfg.sigma
        )));
    }
    let logit = transform_mvn(head_novel, mvn)?;
    let k = logit.dim;
    let draws = sample_mvn(&logit, cfg.n0 + cfg.n, sample_seed)?;
    let preds: Vec<u32> = draws.chunks_exact(k).map(|r| argmax(r) as u32).collect();
    let counts0 = ClassCounts::from_preds(&preds[..cfg.n0], k);
    let counts = ClassCounts::from_preds(&preds[cfg.n0..], k);
    let d = decide(&counts0, &counts, cfg.alpha, cfg.sigma, MVN_PA_SCALE)?;
    Ok(Certificate {
        input_id: x_id,
        prompt_id: head_novel.prompt_id().to_string(),
        predicted_class: d.class,
        radius: d.radius.radius,
        p_a_lower: d.radius.p_a_lower,
        confidence: 1.0 - cfg.alpha,
        method: Method::MvnOvc,
        heuristic: true,
        samples_used: (cfg.n0 + cfg.n) as u64,
        encoder_calls: 0,
        wall_time: started.elapsed().as_secs_f64(),
        irs_match: None,
    })
}
