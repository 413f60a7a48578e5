//! Zero-shot classifier pieces: an image-side encoder producing embeddings
//! and a prompt head whose rows are class-prompt embeddings.
//!
//! Logits are raw dot products `P e`. The predicted class is invariant to any
//! positive rescaling of `e`, so this classifies exactly like cosine
//! similarity while keeping the embedding-to-logit map linear.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, OvcError, Result};
use crate::noise::{mix64, NormalRng};

/// Encoder output. Stored as `f32` so cached rows are exactly what the live path classifies.
pub type Embedding = Vec<f32>;

const UNIT_NORM_TOL: f64 = 1e-6;

/// A point to certify, in the (post-transformation) space noise is added in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPoint {
    pub id: u64,
    pub x: Vec<f64>,
}

impl InputPoint {
    pub fn new(id: u64, x: Vec<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("input {id} has non-finite entries")));
        }
        Ok(Self { id, x })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
}

impl Logits {
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `K x D` matrix of unit-norm prompt embeddings defining a zero-shot classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHead {
    prompt_id: String,
    labels: Vec<String>,
    rows: Vec<f32>,
    k: usize,
    d: usize,
}

impl PromptHead {
    /// Wraps rows that are already unit-norm (within 1e-6).
    pub fn new(prompt_id: impl Into<String>, rows: Vec<f32>, k: usize, d: usize, labels: Vec<String>) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("a prompt head needs at least 2 classes, got {k}")));
        }
        if d == 0 {
            return Err(invalid("embedding dimension must be at least 1"));
        }
        if rows.len() != k * d {
            return Err(OvcError::DimensionMismatch {
                context: "prompt head rows",
                expected: k * d,
                got: rows.len(),
            });
        }
        if labels.len() != k {
            return Err(OvcError::DimensionMismatch {
                context: "prompt head labels",
                expected: k,
                got: labels.len(),
            });
        }
        for (i, row) in rows.chunks_exact(d).enumerate() {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(invalid(format!("prompt row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            labels,
            rows,
            k,
            d,
        })
    }

    /// Normalizes each row to unit length first.
    pub fn from_raw(prompt_id: impl Into<String>, raw: &[f64], k: usize, d: usize, labels: Vec<String>) -> Result<Self> {
        if d == 0 || raw.len() != k * d {
            return Err(OvcError::DimensionMismatch {
                context: "prompt head rows",
                expected: k * d,
                got: raw.len(),
            });
        }
        let mut rows = Vec::with_capacity(raw.len());
        for row in raw.chunks_exact(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(invalid("prompt row has zero or non-finite norm"));
            }
            rows.extend(row.iter().map(|v| (v / norm) as f32));
        }
        Self::new(prompt_id, rows, k, d, labels)
    }

    /// Identity rows: class `i` is embedding axis `i`.
    pub fn identity(prompt_id: impl Into<String>, k: usize) -> Result<Self> {
        let mut rows = vec![0.0_f32; k * k];
        for i in 0..k {
            rows[i * k + i] = 1.0;
        }
        Self::new(prompt_id, rows, k, k, default_labels(k))
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn with_prompt_id(mut self, prompt_id: impl Into<String>) -> Self {
        self.prompt_id = prompt_id.into();
        self
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.d {
            return Err(OvcError::DimensionMismatch {
                context: "embedding vs prompt head",
                expected: self.d,
                got: d,
            });
        }
        Ok(())
    }

    pub fn logits(&self, emb: &[f32]) -> Result<Logits> {
        self.check_dim(emb.len())?;
        Ok(Logits {
            values: self.rows.chunks_exact(self.d).map(|r| dot(r, emb)).collect(),
        })
    }

    pub fn predict(&self, emb: &[f32]) -> Result<usize> {
        self.check_dim(emb.len())?;
        Ok(self.predict_unchecked(emb) as usize)
    }

    #[inline]
    fn predict_unchecked(&self, emb: &[f32]) -> u32 {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, r) in self.rows.chunks_exact(self.d).enumerate() {
            let v = dot(r, emb);
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        best as u32
    }

    /// Predictions for row-major embeddings (`len` must be a multiple of `D`).
    pub fn predict_rows(&self, emb_rows: &[f32]) -> Vec<u32> {
        emb_rows
            .chunks_exact(self.d)
            .map(|e| self.predict_unchecked(e))
            .collect()
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn default_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Cosine similarity between the row-concatenated embeddings of two prompt heads.
pub fn prompt_similarity(a: &PromptHead, b: &PromptHead) -> Result<f64> {
    if a.k != b.k || a.d != b.d {
        return Err(OvcError::DimensionMismatch {
            context: "prompt similarity",
            expected: a.k * a.d,
            got: b.k * b.d,
        });
    }
    let ab = dot(&a.rows, &b.rows);
    let aa = dot(&a.rows, &a.rows);
    let bb = dot(&b.rows, &b.rows);
    if aa == 0.0 || bb == 0.0 {
        return Err(invalid("prompt similarity of a zero vector"));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// A base head plus `n_prompts - 1` jittered, re-normalized variants.
///
/// Each variant row is `normalize(base + jitter * g / sqrt(D))` with `g`
/// standard normal, so `jitter` is the relative size of the perturbation.
pub fn make_synthetic_family(seed: u64, n_prompts: usize, k: usize, d: usize, jitter: f64) -> Result<Vec<PromptHead>> {
    if n_prompts < 2 {
        return Err(invalid("a prompt family needs at least 2 prompts"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(invalid(format!("jitter must be nonnegative, got {jitter}")));
    }
    let mut rng = NormalRng::new(mix64(seed ^ 0x5052_4F4D_5054));
    let base: Vec<f64> = (0..k * d).map(|_| rng.next_normal()).collect();
    let base_head = PromptHead::from_raw(prompt_name(0), &base, k, d, default_labels(k))?;
    let unit: Vec<f64> = base_head.rows.iter().map(|&v| v as f64).collect();
    let scale = jitter / (d as f64).sqrt();
    let mut family = vec![base_head];
    for p in 1..n_prompts {
        let raw: Vec<f64> = unit.iter().map(|&v| v + scale * rng.next_normal()).collect();
        family.push(PromptHead::from_raw(prompt_name(p), &raw, k, d, default_labels(k))?);
    }
    Ok(family)
}

pub fn prompt_name(index: usize) -> String {
    format!("p{index:03}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Seeded multilayer perceptron description. Weights are standard normal
/// scaled by `1/sqrt(fan_in)`; biases are zero. The activation sits between
/// layers, not after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim_in: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub weight_seed: u64,
    /// Artificial latency added per encoder call, in microseconds.
    #[serde(default)]
    pub pad_micros: u64,
}

impl SyntheticSpec {
    /// Two layers of widths `(64, dim_out)` with tanh in between.
    pub fn desk(dim_in: usize, dim_out: usize, weight_seed: u64) -> Self {
        Self {
            dim_in,
            widths: vec![64, dim_out],
            activation: Activation::Tanh,
            weight_seed,
            pad_micros: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderKind {
    Synthetic(SyntheticSpec),
    /// Hand-specified weights.
    Explicit,
    /// Stands in for an encoder that is not loaded; only cached embeddings are usable.
    CacheOnly,
}

#[derive(Debug, Clone)]
struct Layer {
    w: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

/// Image-side encoder with an invocation counter.
#[derive(Debug)]
pub struct Encoder {
    kind: EncoderKind,
    dim_in: usize,
    dim_out: usize,
    layers: Vec<Layer>,
    activation: Activation,
    pad: Duration,
    eval_counter: AtomicU64,
}

impl Encoder {
    pub fn synthetic(spec: SyntheticSpec) -> Result<Self> {
        if spec.dim_in == 0 || spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(invalid("synthetic encoder needs nonzero dim_in and layer widths"));
        }
        let mut rng = NormalRng::new(mix64(spec.weight_seed));
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut n_in = spec.dim_in;
        for &n_out in &spec.widths {
            let scale = 1.0 / (n_in as f64).sqrt();
            let w = (0..n_in * n_out).map(|_| scale * rng.next_normal()).collect();
            layers.push(Layer { w, n_in, n_out });
            n_in = n_out;
        }
        Ok(Self {
            dim_in: spec.dim_in,
            dim_out: n_in,
            activation: spec.activation,
            pad: Duration::from_micros(spec.pad_micros),
            layers,
            kind: EncoderKind::Synthetic(spec),
            eval_counter: AtomicU64::new(0),
        })
    }

    /// Builds from explicit row-major `out x in` weight matrices.
    pub fn from_weights(dim_in: usize, weights: Vec<(Vec<f64>, usize)>, activation: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(weights.len());
        let mut n_in = dim_in;
        for (w, n_out) in weights {
            if w.len() != n_in * n_out {
                return Err(OvcError::DimensionMismatch {
                    context: "encoder layer weights",
                    expected: n_in * n_out,
                    got: w.len(),
                });
            }
            layers.push(Layer { w, n_in, n_out });
            n_in = n_out;
        }
        if layers.is_empty() || dim_in == 0 {
            return Err(invalid("encoder needs at least one layer"));
        }
        Ok(Self {
            kind: EncoderKind::Explicit,
            dim_in,
            dim_out: n_in,
            layers,
            activation,
            pad: Duration::ZERO,
            eval_counter: AtomicU64::new(0),
        })
    }

    /// Single identity layer: `x -> x`.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self::from_weights(dim, vec![(w, dim)], Activation::Identity)
    }

    pub fn cache_only(dim_in: usize, dim_out: usize) -> Self {
        Self {
            kind: EncoderKind::CacheOnly,
            dim_in,
            dim_out,
            layers: Vec::new(),
            activation: Activation::Identity,
            pad: Duration::ZERO,
            eval_counter: AtomicU64::new(0),
        }
    }

    /// Adds artificial latency to every encoder call.
    pub fn with_padding(mut self, per_call: Duration) -> Self {
        self.pad = per_call;
        if let EncoderKind::Synthetic(spec) = &mut self.kind {
            spec.pad_micros = per_call.as_micros() as u64;
        }
        self
    }

    pub fn kind(&self) -> &EncoderKind {
        &self.kind
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    /// Total encoder invocations so far.
    pub fn eval_count(&self) -> u64 {
        self.eval_counter.load(Ordering::SeqCst)
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        match self.kind {
            EncoderKind::CacheOnly => Err(OvcError::EncoderUnavailable),
            _ => Ok(()),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Embedding> {
        self.encode_batch(x, 1)
    }

    /// Encodes `rows` inputs stored row-major; counts `rows` invocations.
    pub fn encode_batch(&self, xs: &[f64], rows: usize) -> Result<Vec<f32>> {
        self.check_live()?;
        if xs.len() != rows * self.dim_in {
            return Err(OvcError::DimensionMismatch {
                context: "encoder input",
                expected: rows * self.dim_in,
                got: xs.len(),
            });
        }
        let widest = self.layers.iter().map(|l| l.n_out).max().unwrap_or(0);
        let mut cur = Vec::with_capacity(widest.max(self.dim_in));
        let mut next = Vec::with_capacity(widest);
        let mut out = Vec::with_capacity(rows * self.dim_out);
        for x in xs.chunks_exact(self.dim_in) {
            cur.clear();
            cur.extend_from_slice(x);
            for (li, layer) in self.layers.iter().enumerate() {
                next.clear();
                next.extend(layer.w.chunks_exact(layer.n_in).map(|w| {
                    w.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>()
                }));
                if li + 1 < self.layers.len() {
                    for v in next.iter_mut() {
                        *v = self.activation.apply(*v);
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
            out.extend(cur.iter().map(|&v| v as f32));
        }
        if !self.pad.is_zero() {
            std::thread::sleep(self.pad * rows as u32);
        }
        self.eval_counter.fetch_add(rows as u64, Ordering::SeqCst);
        Ok(out)
    }
}
