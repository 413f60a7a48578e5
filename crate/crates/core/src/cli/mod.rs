//! Command-line orchestration over datasets, caches, and certification runs.

pub mod dataset;
pub mod report;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::certify::CertConfig;
use crate::error::Result;
use crate::noise::DEFAULT_CHUNK_SIZE;

pub use dataset::{generate, Dataset, DatasetManifest, InputRecord, SyntheticParams};
pub use report::{build_report, Report};
pub use run::{
    cmd_build_cache, cmd_certify, cmd_fit_mvn, CacheLayout, CertificateRecord, RunManifest, RunSummary,
};

#[derive(Debug, Parser)]
#[command(name = "ovc", version, about = "Certify zero-shot prompt classifiers under randomized smoothing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic encoder, prompt family, and inputs.
    GenSynthetic(GenArgs),
    /// Encode every noisy draw per input into embedding caches and record known-prompt metadata.
    BuildCache(RunArgs),
    /// Fit Gaussian parameters to each cached input.
    FitMvn(RunArgs),
    /// Certify prompts with one of the four methods.
    Certify(CertifyArgs),
    /// Turn record files into radius curves, paired scatter data, and speedup tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub dim_in: usize,
    #[arg(long, default_value_t = 100)]
    pub n_inputs: usize,
    #[arg(long, default_value_t = 80)]
    pub n_prompts: usize,
    /// Number of novel prompts; defaults to one in eight.
    #[arg(long)]
    pub novel: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub jitter: f64,
    #[arg(long, default_value_t = 1.0)]
    pub input_scale: f64,
}

impl GenArgs {
    pub fn params(&self) -> SyntheticParams {
        SyntheticParams {
            seed: self.seed,
            k: self.k,
            d: self.d,
            dim_in: self.dim_in,
            n_inputs: self.n_inputs,
            n_prompts: self.n_prompts,
            n_novel: self.novel.unwrap_or((self.n_prompts / 8).max(1)),
            jitter: self.jitter,
            input_scale: self.input_scale,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Dataset directory written by `gen-synthetic`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub n0: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long = "np", default_value_t = 10_000)]
    pub n_p: usize,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha_zeta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    /// Root seed; each input's noise seed is derived from it and the input id.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Certify every k-th input.
    #[arg(long, default_value_t = 1)]
    pub skip: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    pub chunk_size: usize,
    /// Output directory for records and summaries.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Cache root; defaults to `<data>/cache`.
    #[arg(long, env = "OVC_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn cert_config(&self) -> CertConfig {
        CertConfig {
            sigma: self.sigma,
            n0: self.n0,
            n: self.n,
            n_p: self.n_p,
            alpha: self.alpha,
            alpha_zeta: self.alpha_zeta,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Standard,
    Irs,
    Ovc,
    Mvn,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Irs => "irs",
            Mode::Ovc => "ovc",
            Mode::Mvn => "mvn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSet {
    Known,
    Novel,
    All,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "novel")]
    pub prompts: PromptSet,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Record files (`<mode>.jsonl`) from `certify`.
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(args) => {
            let m = generate(&args.out, &args.params())?;
            println!(
                "wrote {} inputs and {} prompts ({} known, {} novel) to {}",
                m.params.n_inputs,
                m.params.n_prompts,
                m.known.len(),
                m.novel.len(),
                args.out.display()
            );
        }
        Command::BuildCache(args) => {
            let n = cmd_build_cache(&RunManifest::from_args(&args, Mode::Ovc, PromptSet::Known)?)?;
            println!("built caches for {n} inputs");
        }
        Command::FitMvn(args) => {
            let n = cmd_fit_mvn(&RunManifest::from_args(&args, Mode::Mvn, PromptSet::Novel)?)?;
            println!("fitted MVN parameters for {n} inputs");
        }
        Command::Certify(args) => {
            let manifest = RunManifest::from_args(&args.run, args.mode, args.prompts)?;
            let summary = cmd_certify(&manifest)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Report(args) => {
            let report = report::cmd_report(&args.records, &args.out)?;
            print!("{}", report.speedup_table());
        }
    }
    Ok(())
}
