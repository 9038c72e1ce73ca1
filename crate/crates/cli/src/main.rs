//! `erfseg` command-line driver.

mod cmd;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erfseg::model::Variant;

/// Invalid configuration or arguments (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A requested check did not hold (exit code 4).
#[derive(Debug)]
pub struct AssertionFailed(pub String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "assertion failed: {}", self.0)
    }
}

impl std::error::Error for AssertionFailed {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "erfseg", version, about = "Attention U-Net segmentation lab")]
struct Cli {
    /// Overrides every seed taken from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully deterministic runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint and export difference maps.
    Eval(EvalArgs),
    /// Measure effective receptive fields of lab networks.
    Erf(ErfArgs),
    /// Check that every file named in a run manifest is intact.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides the config's data section.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "model.variant")]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: erfseg::train::Split,
    /// Also export attention maps of every attention stage.
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabKind {
    Plain,
    Dilated,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Expectation {
    /// Target mean radius strictly above the baseline at every depth.
    Gt,
    /// Target mean radius at most the baseline at every depth.
    Le,
    /// Target mean ERF/RF ratio strictly decreasing over the depths given.
    RatioDecreasing,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[arg(long, value_enum)]
    pub arch: LabKind,
    /// One or more depths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub depth: Vec<usize>,
    #[arg(long)]
    pub dilation: Option<usize>,
    /// Residual updates after the first layer.
    #[arg(long)]
    pub residual: bool,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    /// Number of consecutive seeds starting at `--seed` (default 0).
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long)]
    pub baseline: Option<LabKind>,
    #[arg(long)]
    pub baseline_dilation: Option<usize>,
    #[arg(long, value_enum)]
    pub expect: Option<Expectation>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub dir: PathBuf,
}

/// Global flags shared by every command.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: Option<u64>,
    pub precision: Precision,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!(ConfigError("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let g = Globals {
        seed: cli.seed,
        precision: cli.precision,
    };
    match cli.command {
        Command::Synth(a) => cmd::synth::run(&a, g),
        Command::Train(a) => cmd::train::run(&a, g),
        Command::Eval(a) => cmd::eval::run(&a, g),
        Command::Erf(a) => cmd::erf::run(&a, g),
        Command::Verify(a) => {
            let m = manifest::verify(&a.dir)?;
            println!("{}: {} artifacts intact", a.dir.display(), m.artifacts.len());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<erfseg::Error>() {
            use erfseg::Error as E;
            match e {
                E::Config(_) | E::Value(_) | E::Shape(_) | E::ConvSpec(_) | E::Degenerate(_) => return 2,
                E::Divergence { .. } => return 3,
                _ => {}
            }
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.is::<AssertionFailed>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
