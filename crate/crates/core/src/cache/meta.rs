use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic};
use crate::error::{OvcError, Result};
use crate::noise::{NoiseStream, PredictionTrace};

/// What a known prompt's certification leaves behind for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEntry {
    /// First `n_p` estimation-draw predictions.
    pub trace: Vec<u32>,
    pub p_a_lower: f64,
    pub c_a: u32,
}

/// Per-input ledger of known-prompt certifications sharing one noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CertMetaCache {
    pub input_id: u64,
    pub sigma: f64,
    pub master_seed: u64,
    pub chunk_size: usize,
    /// Chunk offset of the draws the traces were taken from.
    pub trace_chunk_offset: u64,
    /// Keyed by prompt id; iteration order is the tie-break order.
    pub entries: BTreeMap<String, MetaEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetaLine {
    Header {
        input_id: u64,
        sigma: f64,
        master_seed: u64,
        chunk_size: usize,
        trace_chunk_offset: u64,
    },
    Prompt {
        prompt_id: String,
        p_a_lower: f64,
        c_a: u32,
        trace: Vec<u32>,
    },
}

impl CertMetaCache {
    pub fn new(input_id: u64, stream: &NoiseStream, trace_chunk_offset: u64) -> Self {
        Self {
            input_id,
            sigma: stream.sigma,
            master_seed: stream.master_seed,
            chunk_size: stream.chunk_size,
            trace_chunk_offset,
            entries: BTreeMap::new(),
        }
    }

    pub fn stream(&self) -> Result<NoiseStream> {
        NoiseStream::with_chunk_size(self.master_seed, self.sigma, self.chunk_size)
    }

    pub fn trace_fingerprint(&self) -> Result<u64> {
        Ok(self.stream()?.fingerprint(self.trace_chunk_offset))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores the first `n_p` predictions of `trace` with the certificate's `p_A` and class.
    pub fn record(&mut self, prompt_id: &str, trace: &PredictionTrace, n_p: usize, p_a_lower: f64, c_a: usize) -> Result<()> {
        if trace.stream_fingerprint != self.trace_fingerprint()? {
            return Err(OvcError::SeedMismatch(format!(
                "trace for prompt {prompt_id} was drawn from a different noise stream"
            )));
        }
        if trace.len() < n_p {
            return Err(OvcError::ConfigInvalid(format!(
                "trace has {} predictions, need n_p = {n_p}",
                trace.len()
            )));
        }
        self.entries.insert(
            prompt_id.to_string(),
            MetaEntry {
                trace: trace.preds[..n_p].to_vec(),
                p_a_lower,
                c_a: c_a as u32,
            },
        );
        Ok(())
    }

    pub fn entry_trace(&self, prompt_id: &str) -> Result<Option<PredictionTrace>> {
        let fp = self.trace_fingerprint()?;
        Ok(self.entries.get(prompt_id).map(|e| PredictionTrace {
            preds: e.trace.clone(),
            stream_fingerprint: fp,
        }))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&MetaLine::Header {
            input_id: self.input_id,
            sigma: self.sigma,
            master_seed: self.master_seed,
            chunk_size: self.chunk_size,
            trace_chunk_offset: self.trace_chunk_offset,
        })?;
        out.push('\n');
        for (id, e) in &self.entries {
            out.push_str(&serde_json::to_string(&MetaLine::Prompt {
                prompt_id: id.clone(),
                p_a_lower: e.p_a_lower,
                c_a: e.c_a,
                trace: e.trace.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse = |no: usize, line: &str| {
            serde_json::from_str::<MetaLine>(line)
                .map_err(|e| OvcError::Corrupt(format!("{origin}:{}: {e}", no + 1)))
        };
        let mut meta = match lines.next() {
            Some((no, line)) => match parse(no, line)? {
                MetaLine::Header {
                    input_id,
                    sigma,
                    master_seed,
                    chunk_size,
                    trace_chunk_offset,
                } => Self {
                    input_id,
                    sigma,
                    master_seed,
                    chunk_size,
                    trace_chunk_offset,
                    entries: BTreeMap::new(),
                },
                MetaLine::Prompt { .. } => {
                    return Err(OvcError::Corrupt(format!("{origin}: first record must be the header")))
                }
            },
            None => return Err(OvcError::Truncated { field: "header".into() }),
        };
        for (no, line) in lines {
            match parse(no, line)? {
                MetaLine::Prompt {
                    prompt_id,
                    p_a_lower,
                    c_a,
                    trace,
                } => {
                    meta.entries.insert(prompt_id, MetaEntry { trace, p_a_lower, c_a });
                }
                MetaLine::Header { .. } => {
                    return Err(OvcError::Corrupt(format!("{origin}:{}: duplicate header", no + 1)))
                }
            }
        }
        Ok(meta)
    }
}

pub fn store_cert_meta(path: &Path, meta: &CertMetaCache) -> Result<()> {
    write_atomic(path, meta.to_jsonl()?.as_bytes())
}

pub fn load_cert_meta(path: &Path) -> Result<CertMetaCache> {
    let data = read_file(path)?;
    let text = String::from_utf8(data).map_err(|_| OvcError::Corrupt(format!("{} is not UTF-8", path.display())))?;
    CertMetaCache::from_jsonl(&text, &path.display().to_string())
}
