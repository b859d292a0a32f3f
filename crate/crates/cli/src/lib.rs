//! The `graindeck` command line.
//!
//! Every subcommand takes a mandatory `--seed`, an optional JSON `--config`
//! whose values are overridden by flags, and writes its artifacts plus a
//! `run-manifest.json` under the output directory (`--out`, else
//! `GRAINDECK_OUT`, else `graindeck-out`).

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const OUT_ENV: &str = "GRAINDECK_OUT";
pub const DEFAULT_OUT: &str = "graindeck-out";

#[derive(Debug, Parser)]
#[command(
    name = "graindeck",
    version,
    about = "Rice variety classification and bulk composition from grain images"
)]
pub struct Cli {
    /// Seed for every random choice in the run (required).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; a previous run-manifest.json also works.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grain corpus and bulk scenes.
    SynthGen(SynthGenArgs),
    /// Train the grain classifier on a grain dataset.
    TrainClassifier(TrainClassifierArgs),
    /// Train the segmenter on a bulk dataset.
    TrainSegmenter(TrainSegmenterArgs),
    /// Classification metrics from a checkpoint and dataset, or a predictions CSV.
    EvalClassifier(EvalClassifierArgs),
    /// Segmentation IoU of a checkpoint on a bulk dataset.
    EvalSegmenter(EvalSegmenterArgs),
    /// Classify one single-grain image.
    PredictGrain(PredictGrainArgs),
    /// Count and classify every grain in a bulk image.
    PredictBulk(PredictBulkArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::TrainClassifier(_) => "train-classifier",
            Command::TrainSegmenter(_) => "train-segmenter",
            Command::EvalClassifier(_) => "eval-classifier",
            Command::EvalSegmenter(_) => "eval-segmenter",
            Command::PredictGrain(_) => "predict-grain",
            Command::PredictBulk(_) => "predict-bulk",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    /// Number of single-grain images, spread evenly over the varieties.
    #[arg(long)]
    pub grains: Option<usize>,
    /// Number of bulk scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Style manifest JSON.
    #[arg(long)]
    pub styles: Option<PathBuf>,
    /// Square scene side in pixels.
    #[arg(long)]
    pub canvas: Option<u32>,
    #[arg(long)]
    pub min_grains: Option<usize>,
    #[arg(long)]
    pub max_grains: Option<usize>,
    /// Let grains in a scene touch.
    #[arg(long)]
    pub touching: bool,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    FullScale,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    /// Grain dataset root (one directory per variety).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Train/validation/test fractions, e.g. `0.7,0.15,0.15`.
    #[arg(long, value_parser = parse_ratios)]
    pub split: Option<[f64; 3]>,
}

#[derive(Debug, Args)]
pub struct TrainSegmenterArgs {
    /// Bulk dataset root (images/, masks/).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Use the small 128 px preset.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalClassifierArgs {
    /// CSV of `true,predicted` variety names; replaces checkpoint + data.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSegmenterArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictGrainArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictBulkArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Segmenter checkpoint directory.
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    /// Classifier checkpoint directory.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_area: Option<usize>,
    #[arg(long)]
    pub pad: Option<u32>,
    /// 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u8>,
    /// Composition JSON (variety -> count) to compare against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Write each grain crop as crops/grain_NNN.png.
    #[arg(long)]
    pub dump_crops: bool,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| format!("expected 3 comma-separated fractions, got {}", p.len()))
}

/// A bad invocation: missing flag, unreadable config, invalid value.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error to its exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<graindeck_core::Error>() {
        Some(graindeck_core::Error::Divergence { .. }) => EXIT_DIVERGED,
        Some(graindeck_core::Error::InvalidConfig(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.ok_or_else(|| usage("--seed is required"))?;
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    config.apply_seed(seed);
    if let Some(out) = cli.out {
        config.output_dir = Some(out);
    }
    if config.output_dir.is_none() {
        let from_env = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty());
        config.output_dir =
            Some(from_env.map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from));
    }
    commands::dispatch(&cli.command, config)
}
