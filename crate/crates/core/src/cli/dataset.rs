//! Synthetic desk-scale datasets: a seeded encoder, a family of prompt heads,
//! and input vectors, written to a directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{load_prompt_head, write_atomic, write_prompt_head};
use crate::error::{invalid, OvcError, Result};
use crate::model::{make_synthetic_family, Encoder, InputPoint, PromptHead, SyntheticSpec};
use crate::noise::{mix64, NormalRng};

pub const DATASET_FILE: &str = "dataset.json";
pub const INPUTS_FILE: &str = "inputs.jsonl";
pub const PROMPTS_DIR: &str = "prompts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub dim_in: usize,
    pub n_inputs: usize,
    pub n_prompts: usize,
    pub n_novel: usize,
    pub jitter: f64,
    pub input_scale: f64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d == 0 || self.dim_in == 0 || self.n_inputs == 0 {
            return Err(invalid("need k >= 2 and nonzero d, dim_in, n_inputs"));
        }
        if self.n_prompts < 2 {
            return Err(invalid("need at least 2 prompts"));
        }
        if self.n_novel == 0 || self.n_novel >= self.n_prompts {
            return Err(invalid(format!(
                "novel prompt count must be in [1, {}), got {}",
                self.n_prompts, self.n_novel
            )));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(invalid("input_scale must be positive"));
        }
        Ok(())
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub params: SyntheticParams,
    pub encoder: SyntheticSpec,
    pub known: Vec<String>,
    pub novel: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub id: u64,
    pub x: Vec<f64>,
    /// Clean prediction of the first prompt head; used as the reference label.
    pub label: Option<usize>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub inputs: Vec<InputRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(DATASET_FILE)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => OvcError::ConfigInvalid(format!("no {DATASET_FILE} in {}", dir.display())),
            _ => OvcError::Io(e),
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let file = fs::File::open(dir.join(INPUTS_FILE))?;
        let mut inputs = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                inputs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            inputs,
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::synthetic(self.manifest.encoder.clone())
    }

    pub fn prompt_path(&self, prompt_id: &str) -> PathBuf {
        self.dir.join(PROMPTS_DIR).join(format!("{prompt_id}.ovcp"))
    }

    pub fn prompt(&self, prompt_id: &str) -> Result<PromptHead> {
        load_prompt_head(&self.prompt_path(prompt_id))
    }

    pub fn input_point(&self, rec: &InputRecord) -> Result<InputPoint> {
        InputPoint::new(rec.id, rec.x.clone())
    }
}

/// Writes a synthetic dataset; identical parameters produce byte-identical files.
pub fn generate(dir: &Path, params: &SyntheticParams) -> Result<DatasetManifest> {
    params.validate()?;
    let encoder_spec = SyntheticSpec::desk(params.dim_in, params.d, mix64(params.seed ^ 0xE5C0_DE));
    let encoder = Encoder::synthetic(encoder_spec.clone())?;
    let family = make_synthetic_family(params.seed, params.n_prompts, params.k, params.d, params.jitter)?;

    // Seeded Fisher-Yates over prompt ids for the known/novel split.
    let mut ids: Vec<String> = family.iter().map(|h| h.prompt_id().to_string()).collect();
    let mut rng = NormalRng::new(mix64(params.seed ^ 0x5B117));
    for i in (1..ids.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        ids.swap(i, j);
    }
    let mut novel = ids.split_off(ids.len() - params.n_novel);
    let mut known = ids;
    known.sort();
    novel.sort();

    fs::create_dir_all(dir.join(PROMPTS_DIR))?;
    for head in &family {
        write_prompt_head(&dir.join(PROMPTS_DIR).join(format!("{}.ovcp", head.prompt_id())), head)?;
    }

    let mut rng = NormalRng::new(mix64(params.seed ^ 0x1A9075));
    let mut lines = Vec::new();
    for id in 0..params.n_inputs as u64 {
        let x: Vec<f64> = (0..params.dim_in)
            .map(|_| params.input_scale * rng.next_normal())
            .collect();
        let label = family[0].predict(&encoder.encode(&x)?)?;
        let rec = InputRecord {
            id,
            x,
            label: Some(label),
        };
        writeln!(lines, "{}", serde_json::to_string(&rec)?)?;
    }
    write_atomic(&dir.join(INPUTS_FILE), &lines)?;

    let manifest = DatasetManifest {
        params: params.clone(),
        encoder: encoder_spec,
        known,
        novel,
    };
    write_atomic(&dir.join(DATASET_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}
