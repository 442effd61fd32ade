//! `everest` command line: data generation, mask and frame inspection,
//! training, cost tables and gradient checks.
//!
//! Exit codes: 0 on success, 1 when arguments or the configuration are
//! rejected (or a gradient check misses its threshold), 2 on runtime
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{default_norm, load_config, ConfigError, RunConfig, Violation, RATIO_TOL};

use crate::costmodel::ArchSpec;
use crate::rero::{MetricKind, SelectionOrder};

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "EVEREST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "everest", version, about = "Redundancy-robust token selection for masked video autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic moving-square dataset with a manifest.
    Gen(GenArgs),
    /// Score one clip, select tokens and export heatmaps.
    Mask(MaskArgs),
    /// Pick informative frame pairs from one clip.
    Frames(FramesArgs),
    /// Pre-train the masked autoencoder.
    Pretrain(TrainArgs),
    /// Fine-tune a classifier, optionally from a checkpoint.
    Finetune(FinetuneArgs),
    /// Analytic FLOPs and activation memory.
    Flops(FlopsArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GenKind {
    /// One moving square plus its motion mask.
    Square,
    /// Labelled motion-direction clips with a manifest.
    Dataset,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value_t = GenKind::Dataset)]
    pub kind: GenKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 6)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub max_speed: i64,
    /// Square velocity in pixels per frame (`square` only).
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    pub vx: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub vy: i64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Uniform grey background level instead of value noise.
    #[arg(long)]
    pub flat_background: Option<u8>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub rho_pre: f64,
    /// Also draw the encoder-visible subset.
    #[arg(long)]
    pub rho_post: Option<f64>,
    #[arg(long, default_value_t = MetricKind::L2)]
    pub metric: MetricKind,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 96)]
    pub embed_dim: usize,
    /// Take the embedding weights from a checkpoint instead of a seeded init.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub allow_ratio_override: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FramesArgs {
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub tau: usize,
    #[arg(long, default_value_t = 1.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 0.3)]
    pub rho_pre: f64,
    #[arg(long, default_value_t = MetricKind::L2)]
    pub metric: MetricKind,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 96)]
    pub embed_dim: usize,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub no_smoothing: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file receiving the selection.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub allow_ratio_override: bool,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<SelectionOrder>,
    #[arg(long)]
    pub rho_pre: Option<f64>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FlopsArgs {
    #[arg(long, default_value = "vit-b")]
    pub arch: ArchSpec,
    #[arg(long, default_value_t = 0.1)]
    pub visible: f64,
    #[arg(long, default_value_t = 0.3)]
    pub rho_pre: f64,
    #[arg(long, default_value_t = 0.6)]
    pub rho_pre_ft: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value = "table", value_parser = ["table", "csv", "json"])]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => CliError::Runtime(e.into()),
            other => CliError::Invalid(serde_json::to_string_pretty(&other.to_json()).expect("json")),
        }
    }
}


fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Sizes the global rayon pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Mask(a) => commands::mask(&a),
        Command::Frames(a) => commands::frames(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Flops(a) => commands::flops(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Invalid(msg) => eprintln!("{msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
