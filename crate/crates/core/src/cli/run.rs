use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, InputRecord};
use super::{Mode, PromptSet, RunArgs};
use crate::cache::{
    build_embedding_cache, fit_mvn, load_cert_meta, load_embedding_cache, load_mvn, store_cert_meta,
    write_embedding_cache, write_mvn, CertMetaCache, EmbeddingCache,
};
use crate::certify::{
    certify_modified_irs, certify_mvn_ovc, certify_ovc, certify_ovc_traced, certify_standard, CertConfig, Certificate,
    Method,
};
use crate::error::{OvcError, Result};
use crate::model::{Encoder, PromptHead};
use crate::noise::{mix64, Fnv64, NoiseStream};

const BATCH: usize = 16;

/// Everything that determines the content of a certification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub prompt_set: PromptSet,
    pub known: Vec<String>,
    pub novel: Vec<String>,
    pub cfg: CertConfig,
    pub seed: u64,
    pub skip: usize,
    pub chunk_size: usize,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    mode: Mode,
    prompt_set: PromptSet,
    known: &'a [String],
    novel: &'a [String],
    cfg: &'a CertConfig,
    seed: u64,
    skip: usize,
    chunk_size: usize,
}

impl RunManifest {
    pub fn from_args(args: &RunArgs, mode: Mode, prompt_set: PromptSet) -> Result<Self> {
        let dataset = Dataset::load(&args.data)?;
        let m = Self {
            data_dir: args.data.clone(),
            cache_dir: args.cache_dir.clone().unwrap_or_else(|| args.data.join("cache")),
            out_dir: args.out.clone(),
            mode,
            prompt_set,
            known: dataset.manifest.known.clone(),
            novel: dataset.manifest.novel.clone(),
            cfg: args.cert_config(),
            seed: args.seed,
            skip: args.skip,
            chunk_size: args.chunk_size,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.skip == 0 {
            return Err(OvcError::ConfigInvalid("skip must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(OvcError::ConfigInvalid("chunk_size must be at least 1".into()));
        }
        let known: HashSet<_> = self.known.iter().collect();
        if let Some(p) = self.novel.iter().find(|p| known.contains(p)) {
            return Err(OvcError::ConfigInvalid(format!("prompt {p} is both known and novel")));
        }
        Ok(())
    }

    /// Hash of the fields that determine record content (paths excluded).
    pub fn hash(&self) -> String {
        let fields = HashedFields {
            mode: self.mode,
            prompt_set: self.prompt_set,
            known: &self.known,
            novel: &self.novel,
            cfg: &self.cfg,
            seed: self.seed,
            skip: self.skip,
            chunk_size: self.chunk_size,
        };
        let mut h = Fnv64::new();
        h.write(serde_json::to_string(&fields).expect("manifest serializes").as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn targets(&self) -> Vec<String> {
        match self.prompt_set {
            PromptSet::Known => self.known.clone(),
            PromptSet::Novel => self.novel.clone(),
            PromptSet::All => {
                let mut all: Vec<String> = self.known.iter().chain(&self.novel).cloned().collect();
                all.sort();
                all
            }
        }
    }

    pub fn layout(&self) -> CacheLayout {
        CacheLayout {
            root: self.cache_dir.clone(),
            sigma: self.cfg.sigma,
        }
    }

    pub fn stream_for(&self, input_id: u64) -> Result<NoiseStream> {
        NoiseStream::with_chunk_size(input_master_seed(self.seed, input_id), self.cfg.sigma, self.chunk_size)
    }

    pub fn records_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.jsonl", self.mode.as_str()))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_summary.json", self.mode.as_str()))
    }

    fn selected<'a>(&self, dataset: &'a Dataset) -> Vec<&'a InputRecord> {
        dataset.inputs.iter().step_by(self.skip).collect()
    }
}

/// Per-input noise seed derived from the run's root seed.
pub fn input_master_seed(root_seed: u64, input_id: u64) -> u64 {
    mix64(root_seed ^ mix64(input_id.wrapping_add(0x0A11_CE5E_ED00)))
}

/// One directory per noise level; one file of each kind per input.
#[derive(Debug, Clone)]
pub struct CacheLayout {
    pub root: PathBuf,
    pub sigma: f64,
}

impl CacheLayout {
    fn dir(&self) -> PathBuf {
        self.root.join(format!("sigma_{}", self.sigma))
    }

    pub fn embeddings(&self, input_id: u64) -> PathBuf {
        self.dir().join(format!("input_{input_id:06}.ovce"))
    }

    pub fn mvn(&self, input_id: u64) -> PathBuf {
        self.dir().join(format!("input_{input_id:06}.ovcm"))
    }

    pub fn meta(&self, input_id: u64) -> PathBuf {
        self.dir().join(format!("input_{input_id:06}.meta.jsonl"))
    }
}

/// One certificate as emitted by `certify`: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    #[serde(flatten)]
    pub cert: Certificate,
    pub mode: Mode,
    pub manifest_hash: String,
    #[serde(default)]
    pub true_label: Option<usize>,
}

impl CertificateRecord {
    /// Non-abstaining and, when a label exists, correct.
    pub fn is_correct(&self) -> bool {
        match (self.cert.predicted_class, self.true_label) {
            (Some(c), Some(l)) => c == l,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub manifest_hash: String,
    pub records: usize,
    pub resumed: usize,
    pub abstain_rate: f64,
    pub mean_wall_time: f64,
    pub total_wall_time: f64,
    pub total_encoder_calls: u64,
    /// Share of Modified-IRS certificates that took the reuse path.
    pub fast_path_fraction: Option<f64>,
    /// MVN-OVC radii are estimates, not certificates.
    pub heuristic: bool,
}

impl RunSummary {
    pub fn from_records(mode: Mode, manifest_hash: &str, records: &[CertificateRecord], resumed: usize) -> Self {
        let n = records.len();
        let nf = n.max(1) as f64;
        let total_wall: f64 = records.iter().map(|r| r.cert.wall_time).sum();
        let fast = records.iter().filter(|r| r.cert.method == Method::ModifiedIrsFast).count();
        Self {
            mode,
            manifest_hash: manifest_hash.to_string(),
            records: n,
            resumed,
            abstain_rate: records.iter().filter(|r| r.cert.abstained()).count() as f64 / nf,
            mean_wall_time: total_wall / nf,
            total_wall_time: total_wall,
            total_encoder_calls: records.iter().map(|r| r.cert.encoder_calls).sum(),
            fast_path_fraction: (mode == Mode::Irs).then(|| fast as f64 / nf),
            heuristic: mode == Mode::Mvn,
        }
    }
}

fn load_heads(dataset: &Dataset, ids: &[String]) -> Result<Vec<PromptHead>> {
    ids.iter().map(|id| dataset.prompt(id)).collect()
}

fn require(paths: Vec<PathBuf>) -> Result<()> {
    let missing: Vec<PathBuf> = paths.into_iter().filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(OvcError::CacheMiss(missing))
    }
}

fn load_or_build(
    manifest: &RunManifest,
    encoder: &Encoder,
    dataset: &Dataset,
    rec: &InputRecord,
) -> Result<EmbeddingCache> {
    let path = manifest.layout().embeddings(rec.id);
    if let Ok(existing) = load_embedding_cache(&path) {
        let stream = manifest.stream_for(rec.id)?;
        if existing.master_seed == stream.master_seed && existing.check_compatible(rec.id, &manifest.cfg).is_ok() {
            return Ok(existing);
        }
    }
    let stream = manifest.stream_for(rec.id)?;
    let cache = build_embedding_cache(encoder, &dataset.input_point(rec)?, &manifest.cfg, &stream)?;
    write_embedding_cache(&path, &cache)?;
    Ok(cache)
}

/// Builds embedding caches and known-prompt metadata for every selected input.
///
/// The known prompts are certified from the freshly built cache, which gives
/// exactly the certificates (and traces) of the standard certifier.
pub fn cmd_build_cache(manifest: &RunManifest) -> Result<usize> {
    manifest.validate()?;
    let dataset = Dataset::load(&manifest.data_dir)?;
    let encoder = dataset.encoder()?;
    let known = load_heads(&dataset, &manifest.known)?;
    let selected = manifest.selected(&dataset);
    let layout = manifest.layout();
    let started = Instant::now();
    for (b, batch) in selected.chunks(BATCH).enumerate() {
        batch.par_iter().try_for_each(|rec| -> Result<()> {
            let cache = load_or_build(manifest, &encoder, &dataset, rec)?;
            let stream = manifest.stream_for(rec.id)?;
            let mut meta = CertMetaCache::new(rec.id, &stream, stream.estimation_offset(manifest.cfg.n0));
            for head in &known {
                let (cert, trace) = certify_ovc_traced(head, rec.id, &manifest.cfg, &cache)?;
                let c_a = cert
                    .predicted_class
                    .unwrap_or_else(|| trace.to_counts(head.num_classes()).top());
                meta.record(head.prompt_id(), &trace, manifest.cfg.n_p, cert.p_a_lower, c_a)?;
            }
            store_cert_meta(&layout.meta(rec.id), &meta)
        })?;
        eprintln!(
            "build-cache: {}/{} inputs ({:.1}s)",
            ((b + 1) * BATCH).min(selected.len()),
            selected.len(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(selected.len())
}

/// Fits and stores MVN parameters from each selected input's embedding cache.
pub fn cmd_fit_mvn(manifest: &RunManifest) -> Result<usize> {
    manifest.validate()?;
    let dataset = Dataset::load(&manifest.data_dir)?;
    let selected = manifest.selected(&dataset);
    let layout = manifest.layout();
    require(selected.iter().map(|r| layout.embeddings(r.id)).collect())?;
    selected.par_iter().try_for_each(|rec| -> Result<()> {
        let cache = load_embedding_cache(&layout.embeddings(rec.id))?;
        cache.check_compatible(rec.id, &manifest.cfg)?;
        let mvn = fit_mvn(&cache.rows, cache.dim)?.for_input(rec.id, manifest.cfg.sigma);
        write_mvn(&layout.mvn(rec.id), &mvn)
    })?;
    Ok(selected.len())
}

fn read_records(path: &Path) -> Result<Vec<CertificateRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| OvcError::Corrupt(format!("{}:{}: {e}", path.display(), no + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_record_file(path: &Path) -> Result<Vec<CertificateRecord>> {
    read_records(path)
}

fn mvn_sample_seed(master_seed: u64) -> u64 {
    mix64(master_seed ^ 0x004D_564E_4F56_43)
}

fn certify_input(
    manifest: &RunManifest,
    dataset: &Dataset,
    encoder: Option<&Encoder>,
    heads: &[&PromptHead],
    rec: &InputRecord,
) -> Result<Vec<Certificate>> {
    let cfg = &manifest.cfg;
    let layout = manifest.layout();
    let live = || encoder.ok_or(OvcError::EncoderUnavailable);
    match manifest.mode {
        Mode::Standard => {
            let x = dataset.input_point(rec)?;
            let stream = manifest.stream_for(rec.id)?;
            heads
                .iter()
                .map(|h| certify_standard(live()?, h, &x, cfg, &stream))
                .collect()
        }
        Mode::Irs => {
            let x = dataset.input_point(rec)?;
            let t0 = Instant::now();
            let meta = load_cert_meta(&layout.meta(rec.id))?;
            let load = t0.elapsed().as_secs_f64() / heads.len() as f64;
            heads
                .iter()
                .map(|h| {
                    let mut c = certify_modified_irs(live()?, h, &x, cfg, &meta)?;
                    c.wall_time += load;
                    Ok(c)
                })
                .collect()
        }
        Mode::Ovc => {
            let t0 = Instant::now();
            let cache = load_embedding_cache(&layout.embeddings(rec.id))?;
            let load = t0.elapsed().as_secs_f64() / heads.len() as f64;
            heads
                .iter()
                .map(|h| {
                    let mut c = certify_ovc(h, rec.id, cfg, &cache)?;
                    c.wall_time += load;
                    Ok(c)
                })
                .collect()
        }
        Mode::Mvn => {
            let t0 = Instant::now();
            let mvn = load_mvn(&layout.mvn(rec.id))?;
            let load = t0.elapsed().as_secs_f64() / heads.len() as f64;
            let seed = mvn_sample_seed(input_master_seed(manifest.seed, rec.id));
            heads
                .iter()
                .map(|h| {
                    let mut c = certify_mvn_ovc(h, rec.id, cfg, &mvn, seed)?;
                    c.wall_time += load;
                    Ok(c)
                })
                .collect()
        }
    }
}

/// Certifies the manifest's target prompts on every selected input, appending
/// one record per (input, prompt) to `<out>/<mode>.jsonl`. Pairs already
/// present for the same manifest hash are skipped, so interrupted runs resume.
///
/// Cache-backed modes charge each record an equal share of the per-input cache load time.
pub fn cmd_certify(manifest: &RunManifest) -> Result<RunSummary> {
    manifest.validate()?;
    let dataset = Dataset::load(&manifest.data_dir)?;
    let hash = manifest.hash();
    let target_ids = manifest.targets();
    let heads = load_heads(&dataset, &target_ids)?;
    let selected = manifest.selected(&dataset);
    let layout = manifest.layout();

    let required: Vec<PathBuf> = match manifest.mode {
        Mode::Standard => Vec::new(),
        Mode::Irs => selected.iter().map(|r| layout.meta(r.id)).collect(),
        Mode::Ovc => selected.iter().map(|r| layout.embeddings(r.id)).collect(),
        Mode::Mvn => selected.iter().map(|r| layout.mvn(r.id)).collect(),
    };
    require(required)?;

    let encoder = match manifest.mode {
        Mode::Standard | Mode::Irs => Some(dataset.encoder()?),
        Mode::Ovc | Mode::Mvn => None,
    };

    fs::create_dir_all(&manifest.out_dir)?;
    let path = manifest.records_path();
    let existing: Vec<CertificateRecord> = read_records(&path)?
        .into_iter()
        .filter(|r| r.manifest_hash == hash)
        .collect();
    let done: HashSet<(u64, String)> = existing
        .iter()
        .map(|r| (r.cert.input_id, r.cert.prompt_id.clone()))
        .collect();
    let resumed = existing.len();

    let started = Instant::now();
    for batch in selected.chunks(BATCH) {
        let results = batch
            .par_iter()
            .map(|rec| {
                let pending: Vec<&PromptHead> = heads
                    .iter()
                    .filter(|h| !done.contains(&(rec.id, h.prompt_id().to_string())))
                    .collect();
                if pending.is_empty() {
                    return Ok(Vec::new());
                }
                let certs = certify_input(manifest, &dataset, encoder.as_ref(), &pending, rec)?;
                Ok(certs
                    .into_iter()
                    .map(|cert| CertificateRecord {
                        cert,
                        mode: manifest.mode,
                        manifest_hash: hash.clone(),
                        true_label: rec.label,
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut buf = String::new();
        for rec in results.into_iter().flatten() {
            buf.push_str(&serde_json::to_string(&rec)?);
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())?;
        file.sync_data()?;
    }
    eprintln!(
        "certify[{}]: {} inputs x {} prompts in {:.1}s",
        manifest.mode.as_str(),
        selected.len(),
        heads.len(),
        started.elapsed().as_secs_f64()
    );

    let all: Vec<CertificateRecord> = read_records(&path)?
        .into_iter()
        .filter(|r| r.manifest_hash == hash)
        .collect();
    let summary = RunSummary::from_records(manifest.mode, &hash, &all, resumed);
    fs::write(manifest.summary_path(), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
