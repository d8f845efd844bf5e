//! `gss`: generate datasets, train and evaluate models, render maps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "gss", version, about = "Grouped amodal semantic segmentation toolkit")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic layered-scene dataset.
    Gen(GenArgs),
    /// Train a flat (dss) or grouped (gss) model.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground truth itself) on a split.
    Eval(EvalArgs),
    /// Write depth, visible and group maps of a sample as images.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Group schema config.
    #[arg(long)]
    pub schema: PathBuf,
    /// Scene config; defaults to the built-in toy scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Total scene count, split 5:1 into train and test.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    pub scenes: Option<usize>,
    #[arg(long, requires = "test")]
    pub train: Option<usize>,
    #[arg(long, requires = "train")]
    pub test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 0.4)]
    pub max_object_coverage: f64,
    #[arg(long, default_value_t = 0.4)]
    pub max_dont_care_coverage: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Gss,
    Dss,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// JSON overrides for the architecture (base_width, levels, norm_eps,
    /// output_sigmoid).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// JSON train config; missing keys take the defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Max,
    Sum,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// How G_0 probabilities form the void entry when deriving present
    /// masks from a flat posterior.
    #[arg(long, value_enum, default_value = "max")]
    pub pooling: PoolingArg,
    /// Score the ground truth against itself.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A `.gss` sample file.
    #[arg(long)]
    pub sample: PathBuf,
    /// Schema config; defaults to the one of the dataset holding the sample.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Colour table, one `<category> <r> <g> <b>` line per category.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Render the model's prediction for the sample instead of its labels.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "max")]
    pub pooling: PoolingArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Render(a) => commands::render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
