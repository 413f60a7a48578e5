//! Python bindings: `import ovc_cert`.

use std::path::PathBuf;

use ovc_core::cache::{self, CertMetaCache as CoreMeta, EmbeddingCache as CoreCache, MvnParams as CoreMvn};
use ovc_core::certify::{self, CertConfig as CoreConfig, Certificate as CoreCert};
use ovc_core::model::{self, Encoder as CoreEncoder, InputPoint, PromptHead as CoreHead, SyntheticSpec};
use ovc_core::noise::{self, NoiseStream as CoreStream};
use ovc_core::{stats, OvcError};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(ovc_cert, CacheCorruptError, PyException, "A cache or metadata file failed validation.");
create_exception!(ovc_cert, SeedMismatchError, PyException, "Cached metadata was drawn from different noise.");

fn py_err(e: OvcError) -> PyErr {
    let msg = e.to_string();
    match e {
        OvcError::CacheMiss(_) | OvcError::MvnMissing(_) => PyFileNotFoundError::new_err(msg),
        OvcError::SeedMismatch(_) | OvcError::EmptyCache => SeedMismatchError::new_err(msg),
        OvcError::FingerprintMismatch(_)
        | OvcError::MagicMismatch { .. }
        | OvcError::VersionUnsupported { .. }
        | OvcError::Truncated { .. }
        | OvcError::ChecksumMismatch { .. }
        | OvcError::Corrupt(_)
        | OvcError::Json(_) => CacheCorruptError::new_err(msg),
        OvcError::InvalidArgument(_)
        | OvcError::ConfigInvalid(_)
        | OvcError::DimensionMismatch { .. }
        | OvcError::InsufficientSamples { .. } => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for ovc_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn input(id: u64, x: Vec<f64>) -> PyResult<InputPoint> {
    InputPoint::new(id, x).py()
}

// ------------------------------------------------------------------ stats

#[pyfunction]
fn lower_conf_bound(k: u64, n: u64, conf: f64) -> PyResult<f64> {
    stats::lower_conf_bound(k, n, conf).py()
}

#[pyfunction]
fn upper_conf_bound(k: u64, n: u64, conf: f64) -> PyResult<f64> {
    stats::upper_conf_bound(k, n, conf).py()
}

#[pyfunction]
fn std_normal_cdf(x: f64) -> f64 {
    stats::std_normal_cdf(x)
}

#[pyfunction]
fn inv_std_normal_cdf(p: f64) -> PyResult<f64> {
    stats::inv_std_normal_cdf(p).py()
}

/// `None` means abstain.
#[pyfunction]
fn radius(p_a_lower: f64, sigma: f64) -> PyResult<Option<f64>> {
    Ok(stats::radius_one_sided(p_a_lower, sigma).py()?.radius)
}

#[pyfunction]
fn radius_irs(p_a_lower: f64, zeta: f64, sigma: f64) -> PyResult<Option<f64>> {
    Ok(stats::radius_irs(p_a_lower, zeta, sigma).py()?.radius)
}

#[pyfunction]
fn mix64(z: u64) -> u64 {
    noise::mix64(z)
}

// ------------------------------------------------------------------ types

#[pyclass(frozen, skip_from_py_object, module = "ovc_cert")]
#[derive(Clone)]
struct CertConfig(CoreConfig);

#[pymethods]
impl CertConfig {
    #[new]
    #[pyo3(signature = (sigma, n0=100, n=100_000, n_p=10_000, alpha=0.001, alpha_zeta=0.001, gamma=0.01))]
    fn new(sigma: f64, n0: usize, n: usize, n_p: usize, alpha: f64, alpha_zeta: f64, gamma: f64) -> PyResult<Self> {
        let cfg = CoreConfig {
            sigma,
            n0,
            n,
            n_p,
            alpha,
            alpha_zeta,
            gamma,
        };
        cfg.validate().py()?;
        Ok(Self(cfg))
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }
    #[getter]
    fn n0(&self) -> usize {
        self.0.n0
    }
    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }
    #[getter]
    fn n_p(&self) -> usize {
        self.0.n_p
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    #[getter]
    fn alpha_zeta(&self) -> f64 {
        self.0.alpha_zeta
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "CertConfig(sigma={}, n0={}, n={}, n_p={}, alpha={}, alpha_zeta={}, gamma={})",
            c.sigma, c.n0, c.n, c.n_p, c.alpha, c.alpha_zeta, c.gamma
        )
    }
}

#[pyclass(frozen, module = "ovc_cert")]
struct Certificate(CoreCert);

#[pymethods]
impl Certificate {
    #[getter]
    fn input_id(&self) -> u64 {
        self.0.input_id
    }
    #[getter]
    fn prompt_id(&self) -> &str {
        &self.0.prompt_id
    }
    #[getter]
    fn predicted_class(&self) -> Option<usize> {
        self.0.predicted_class
    }
    #[getter]
    fn radius(&self) -> Option<f64> {
        self.0.radius
    }
    #[getter]
    fn p_a_lower(&self) -> f64 {
        self.0.p_a_lower
    }
    #[getter]
    fn confidence(&self) -> f64 {
        self.0.confidence
    }
    #[getter]
    fn method(&self) -> &'static str {
        self.0.method.as_str()
    }
    #[getter]
    fn heuristic(&self) -> bool {
        self.0.heuristic
    }
    #[getter]
    fn samples_used(&self) -> u64 {
        self.0.samples_used
    }
    #[getter]
    fn encoder_calls(&self) -> u64 {
        self.0.encoder_calls
    }
    #[getter]
    fn wall_time(&self) -> f64 {
        self.0.wall_time
    }
    /// `(sim_prompt_id, disagreement_count, n_p, zeta)` on the Modified-IRS fast path.
    #[getter]
    fn irs_match(&self) -> Option<(String, u64, u64, f64)> {
        self.0
            .irs_match
            .as_ref()
            .map(|m| (m.sim_prompt_id.clone(), m.disagreement_count, m.n_p, m.zeta_x))
    }

    fn abstained(&self) -> bool {
        self.0.abstained()
    }

    /// Same class, radius and bound, compared bitwise.
    fn same_outcome(&self, other: &Certificate) -> bool {
        self.0.same_outcome(&other.0)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Certificate(input_id={}, prompt_id={:?}, method={}, class={:?}, radius={:?}, p_a_lower={})",
            self.0.input_id,
            self.0.prompt_id,
            self.0.method.as_str(),
            self.0.predicted_class,
            self.0.radius,
            self.0.p_a_lower
        )
    }
}

#[pyclass(frozen, skip_from_py_object, module = "ovc_cert")]
#[derive(Clone)]
struct PromptHead(CoreHead);

#[pymethods]
impl PromptHead {
    /// Rows are normalized to unit length.
    #[new]
    #[pyo3(signature = (prompt_id, rows, k, d, labels=None))]
    fn new(prompt_id: String, rows: Vec<f64>, k: usize, d: usize, labels: Option<Vec<String>>) -> PyResult<Self> {
        let labels = labels.unwrap_or_else(|| model::default_labels(k));
        Ok(Self(CoreHead::from_raw(prompt_id, &rows, k, d, labels).py()?))
    }

    #[staticmethod]
    fn identity(prompt_id: String, k: usize) -> PyResult<Self> {
        Ok(Self(CoreHead::identity(prompt_id, k).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cache::load_prompt_head(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cache::write_prompt_head(&path, &self.0).py()
    }

    #[getter]
    fn prompt_id(&self) -> &str {
        self.0.prompt_id()
    }
    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }
    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels().to_vec()
    }
    #[getter]
    fn rows(&self) -> Vec<f32> {
        self.0.rows().to_vec()
    }

    fn with_prompt_id(&self, prompt_id: String) -> Self {
        Self(self.0.clone().with_prompt_id(prompt_id))
    }

    fn logits(&self, embedding: Vec<f32>) -> PyResult<Vec<f64>> {
        Ok(self.0.logits(&embedding).py()?.values)
    }

    fn predict(&self, embedding: Vec<f32>) -> PyResult<usize> {
        self.0.predict(&embedding).py()
    }

    fn similarity(&self, other: &PromptHead) -> PyResult<f64> {
        model::prompt_similarity(&self.0, &other.0).py()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, n_prompts, k, d, jitter=0.05))]
fn synthetic_family(seed: u64, n_prompts: usize, k: usize, d: usize, jitter: f64) -> PyResult<Vec<PromptHead>> {
    Ok(model::make_synthetic_family(seed, n_prompts, k, d, jitter)
        .py()?
        .into_iter()
        .map(PromptHead)
        .collect())
}

#[pyclass(frozen, module = "ovc_cert")]
struct Encoder(CoreEncoder);

#[pymethods]
impl Encoder {
    /// Seeded tanh network with one hidden layer of 64 units.
    #[staticmethod]
    #[pyo3(signature = (dim_in, dim_out, seed, pad_micros=0))]
    fn synthetic(dim_in: usize, dim_out: usize, seed: u64, pad_micros: u64) -> PyResult<Self> {
        let enc = CoreEncoder::synthetic(SyntheticSpec::desk(dim_in, dim_out, seed)).py()?;
        Ok(Self(enc.with_padding(std::time::Duration::from_micros(pad_micros))))
    }

    #[staticmethod]
    fn identity(dim: usize) -> PyResult<Self> {
        Ok(Self(CoreEncoder::identity(dim).py()?))
    }

    #[getter]
    fn dim_in(&self) -> usize {
        self.0.dim_in()
    }
    #[getter]
    fn dim_out(&self) -> usize {
        self.0.dim_out()
    }
    #[getter]
    fn eval_count(&self) -> u64 {
        self.0.eval_count()
    }

    fn encode(&self, x: Vec<f64>) -> PyResult<Vec<f32>> {
        self.0.encode(&x).py()
    }
}

#[pyclass(frozen, skip_from_py_object, module = "ovc_cert")]
#[derive(Clone)]
struct NoiseStream(CoreStream);

#[pymethods]
impl NoiseStream {
    #[new]
    #[pyo3(signature = (master_seed, sigma, chunk_size=noise::DEFAULT_CHUNK_SIZE))]
    fn new(master_seed: u64, sigma: f64, chunk_size: usize) -> PyResult<Self> {
        Ok(Self(CoreStream::with_chunk_size(master_seed, sigma, chunk_size).py()?))
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.0.master_seed
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }
    #[getter]
    fn chunk_size(&self) -> usize {
        self.0.chunk_size
    }

    /// Row-major `chunk_size x dim` noise, already scaled by sigma.
    fn gaussian_chunk(&self, chunk_index: u64, dim: usize) -> PyResult<Vec<f64>> {
        self.0.gaussian_chunk(chunk_index, dim).py()
    }

    fn estimation_offset(&self, n0: usize) -> u64 {
        self.0.estimation_offset(n0)
    }
}

#[pyclass(frozen, module = "ovc_cert")]
struct EmbeddingCache(CoreCache);

#[pymethods]
impl EmbeddingCache {
    #[staticmethod]
    fn build(encoder: &Encoder, input_id: u64, x: Vec<f64>, cfg: &CertConfig, stream: &NoiseStream) -> PyResult<Self> {
        let x = input(input_id, x)?;
        Ok(Self(cache::build_embedding_cache(&encoder.0, &x, &cfg.0, &stream.0).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cache::load_embedding_cache(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cache::write_embedding_cache(&path, &self.0).py()
    }

    #[getter]
    fn input_id(&self) -> u64 {
        self.0.input_id
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }
    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }
    #[getter]
    fn num_rows(&self) -> usize {
        self.0.num_rows()
    }
    #[getter]
    fn fingerprint(&self) -> u64 {
        self.0.fingerprint
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.num_rows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.0.rows[i * self.0.dim..(i + 1) * self.0.dim].to_vec())
    }

    fn fit_mvn(&self) -> PyResult<MvnParams> {
        let m = cache::fit_mvn(&self.0.rows, self.0.dim).py()?;
        Ok(MvnParams(m.for_input(self.0.input_id, self.0.sigma)))
    }
}

#[pyclass(frozen, module = "ovc_cert")]
struct MvnParams(CoreMvn);

#[pymethods]
impl MvnParams {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cache::load_mvn(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cache::write_mvn(&path, &self.0).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }
    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.0.mu.clone()
    }
    #[getter]
    fn cov(&self) -> Vec<f64> {
        self.0.cov.clone()
    }
    #[getter]
    fn jitter_applied(&self) -> f64 {
        self.0.jitter_applied
    }

    /// Logit-space parameters `(P mu, P Sigma P^T)` for a prompt head.
    fn transform(&self, head: &PromptHead) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let t = cache::transform_mvn(&head.0, &self.0).py()?;
        Ok((t.mu, t.cov))
    }
}

#[pyclass(module = "ovc_cert")]
struct CertMetaCache(CoreMeta);

#[pymethods]
impl CertMetaCache {
    /// Empty ledger whose traces come from the estimation draws of `stream`.
    #[new]
    fn new(input_id: u64, stream: &NoiseStream, n0: usize) -> Self {
        Self(CoreMeta::new(input_id, &stream.0, stream.0.estimation_offset(n0)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cache::load_cert_meta(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cache::store_cert_meta(&path, &self.0).py()
    }

    fn prompt_ids(&self) -> Vec<String> {
        self.0.entries.keys().cloned().collect()
    }

    fn __len__(&self) -> usize {
        self.0.entries.len()
    }

    /// Cached `(p_a_lower, c_a)` for a known prompt.
    fn entry(&self, prompt_id: &str) -> Option<(f64, u32)> {
        self.0.entries.get(prompt_id).map(|e| (e.p_a_lower, e.c_a))
    }
}

// ------------------------------------------------------------------ certify

#[pyfunction]
fn certify_standard(
    encoder: &Encoder,
    head: &PromptHead,
    input_id: u64,
    x: Vec<f64>,
    cfg: &CertConfig,
    stream: &NoiseStream,
) -> PyResult<Certificate> {
    let x = input(input_id, x)?;
    Ok(Certificate(certify::certify_standard(&encoder.0, &head.0, &x, &cfg.0, &stream.0).py()?))
}

/// Standard certification that also records the prompt as known in `meta`.
#[pyfunction]
fn certify_and_record(
    encoder: &Encoder,
    head: &PromptHead,
    x: Vec<f64>,
    cfg: &CertConfig,
    meta: &mut CertMetaCache,
) -> PyResult<Certificate> {
    let x = input(meta.0.input_id, x)?;
    Ok(Certificate(certify::certify_and_record(&encoder.0, &head.0, &x, &cfg.0, &mut meta.0).py()?))
}

#[pyfunction]
fn certify_modified_irs(
    encoder: &Encoder,
    head: &PromptHead,
    x: Vec<f64>,
    cfg: &CertConfig,
    meta: &CertMetaCache,
) -> PyResult<Certificate> {
    let x = input(meta.0.input_id, x)?;
    Ok(Certificate(certify::certify_modified_irs(&encoder.0, &head.0, &x, &cfg.0, &meta.0).py()?))
}

#[pyfunction]
fn certify_ovc(head: &PromptHead, input_id: u64, cfg: &CertConfig, cache: &EmbeddingCache) -> PyResult<Certificate> {
    Ok(Certificate(certify::certify_ovc(&head.0, input_id, &cfg.0, &cache.0).py()?))
}

#[pyfunction]
fn certify_mvn_ovc(
    head: &PromptHead,
    input_id: u64,
    cfg: &CertConfig,
    mvn: &MvnParams,
    sample_seed: u64,
) -> PyResult<Certificate> {
    Ok(Certificate(certify::certify_mvn_ovc(&head.0, input_id, &cfg.0, &mvn.0, sample_seed).py()?))
}

#[pymodule]
fn ovc_cert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CacheCorruptError", m.py().get_type::<CacheCorruptError>())?;
    m.add("SeedMismatchError", m.py().get_type::<SeedMismatchError>())?;
    m.add("MVN_PA_SCALE", certify::MVN_PA_SCALE)?;
    m.add_class::<CertConfig>()?;
    m.add_class::<Certificate>()?;
    m.add_class::<PromptHead>()?;
    m.add_class::<Encoder>()?;
    m.add_class::<NoiseStream>()?;
    m.add_class::<EmbeddingCache>()?;
    m.add_class::<MvnParams>()?;
    m.add_class::<CertMetaCache>()?;
    m.add_function(wrap_pyfunction!(lower_conf_bound, m)?)?;
    m.add_function(wrap_pyfunction!(upper_conf_bound, m)?)?;
    m.add_function(wrap_pyfunction!(std_normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(inv_std_normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(radius, m)?)?;
    m.add_function(wrap_pyfunction!(radius_irs, m)?)?;
    m.add_function(wrap_pyfunction!(mix64, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_family, m)?)?;
    m.add_function(wrap_pyfunction!(certify_standard, m)?)?;
    m.add_function(wrap_pyfunction!(certify_and_record, m)?)?;
    m.add_function(wrap_pyfunction!(certify_modified_irs, m)?)?;
    m.add_function(wrap_pyfunction!(certify_ovc, m)?)?;
    m.add_function(wrap_pyfunction!(certify_mvn_ovc, m)?)?;
    Ok(())
}
