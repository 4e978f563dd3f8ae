mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmamba3d::tensor::Precision;

/// Exit codes.
const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

/// A rejected flag, config value or check.
#[derive(Debug)]
pub struct Validation(pub String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

/// Volumetric classification with hybrid convolution / selective-scan blocks.
#[derive(Debug, Parser)]
#[command(name = "vmamba3d", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with optional `model`, `train` and `synth` sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for generation, splitting, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Arithmetic precision of forward and backward passes.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: vmamba3d::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled synthetic volumes and a manifest.
    Synth(SynthArgs),
    /// Stratified train/test split of a manifest.
    Split(SplitArgs),
    /// Train a model and write a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write JSON and CSV reports.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Randomized parallel-vs-sequential-vs-oracle scan equivalence.
    ScanCheck(ScanCheckArgs),
    /// Time attention against the selective scan over sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Volumes per class.
    #[arg(long, default_value_t = 10)]
    pub count: u64,
    /// Volume extents, overriding the config.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub dims: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training share of every class.
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of training volumes.
    #[arg(long = "train")]
    pub train: PathBuf,
    /// Manifest of evaluation volumes.
    #[arg(long = "eval")]
    pub eval: PathBuf,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint; its configuration replaces the config file.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset name recorded in the report (defaults to the manifest path).
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Skip the composite layers and the end-to-end model.
    #[arg(long)]
    pub ops_only: bool,
    /// Perturb the backward rule of one op (harness self-test).
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScanCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
    #[arg(long, default_value_t = 16)]
    pub max_state: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub state_dim: usize,
    #[arg(long, default_value_t = 9)]
    pub repetitions: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Validation>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<vmamba3d::Error>() {
            use vmamba3d::Error as E;
            return match e {
                E::Divergence { .. } => EXIT_DIVERGENCE,
                E::Io(_) | E::Nifti(_) | E::Checkpoint(_) | E::Manifest { .. } | E::Json(_) => {
                    EXIT_IO
                }
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
