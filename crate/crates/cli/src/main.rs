//! `epimerge`: build bases, merge checkpoints, diagnose and sweep.

mod commands;
mod suite;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epimerge_core::merge::{DEFAULT_JITTER, DEFAULT_KEEP_FRACTION};
use epimerge_core::{Error, Method};

/// Default sweep grids.
pub const DEFAULT_ALPHAS: [f64; 6] = [0.20, 0.30, 0.40, 0.50, 0.70, 1.00];
pub const DEFAULT_RANKS: [usize; 5] = [2, 4, 8, 16, 32];
pub const DEFAULT_FRACTIONS: [f64; 7] = [0.005, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

#[derive(Parser, Debug)]
#[command(name = "epimerge", version, about = "Curvature-aware subspace merging of fine-tuned models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the per-layer tagged basis from task vectors.
    BuildBasis(BuildBasisArgs),
    /// Merge fine-tuned checkpoints into one.
    Merge(MergeArgs),
    /// Report curvature heterogeneity, Fréchet variance and residual energy as JSON.
    Diagnose(DiagnoseArgs),
    /// Grid sweep over methods, ranks, alphas and Fisher fractions on a synthetic suite.
    Sweep(SweepArgs),
    /// Generate a synthetic suite: base, fine-tuned models, curvature and data.
    Synth(SynthArgs),
    /// Accumulate an empirical Fisher diagonal from a gradient stream.
    Fisher(FisherArgs),
    /// Loss along the straight path from each task model to a merged model.
    Scan(ScanArgs),
}

#[derive(Args, Debug)]
struct ModelInputs {
    /// Shared pre-trained checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Fine-tuned checkpoints, one per task.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildBasisArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Per-task rank k.
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// One of am, ta, ties, fisher, tsvm, epimer-mean, epimer-sum.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Fisher diagonals, one per model (curvature methods only).
    #[arg(long, num_args = 1..)]
    fishers: Vec<PathBuf>,
    /// Prebuilt basis; otherwise built at `--rank`.
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Global rescaling; defaults to 1/sqrt(T).
    #[arg(long)]
    alpha: Option<f64>,
    /// Task weights summing to one; defaults to uniform.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    jitter: f64,
    #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
    keep_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AggregatorArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long, num_args = 1.., required = true)]
    fishers: Vec<PathBuf>,
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    jitter: f64,
    /// Coefficients at which the Fréchet variance is evaluated.
    #[arg(long, value_enum, default_value_t = AggregatorArg::Mean)]
    aggregator: AggregatorArg,
    /// Rescaling for the sum aggregator; defaults to 1/sqrt(T).
    #[arg(long)]
    alpha: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Directory written by `synth --kind mlp`.
    #[arg(long)]
    suite: PathBuf,
    /// Comma-separated methods; defaults to all seven.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long = "rank", visible_alias = "ranks", value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long = "alpha", visible_alias = "alphas", value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long = "fraction", visible_alias = "fractions", value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    jitter: f64,
    #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
    keep_fraction: f64,
    /// Seed of the Fisher subsample shuffle.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid points evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SuiteKind {
    Mlp,
    Quadratic,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SuiteKind::Mlp)]
    kind: SuiteKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    inputs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per task before the train/test split.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    /// Fine-tuning step budget.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Quadratic layer shapes, e.g. `8x8,6x10`.
    #[arg(long, value_delimiter = ',', default_value = "8x8,6x10")]
    dims: Vec<String>,
    /// Quadratic curvature heterogeneity in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    heterogeneity: f64,
}

#[derive(Args, Debug)]
struct FisherArgs {
    /// Gradient stream container (`<layer>#<index>` tensors).
    #[arg(long)]
    grads: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Directory written by `synth --kind mlp`.
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    merged: PathBuf,
    /// Points on each path, endpoints included.
    #[arg(long, default_value_t = 11)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else if matches!(e, Error::InvalidArgument(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Every input must exist before any work starts.
pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CliResult {
    for p in paths {
        if !p.exists() {
            return Err(Failure::Data(format!("input not found: {}", p.display())));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPIMERGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildBasis(a) => commands::build_basis(a),
        Command::Merge(a) => commands::merge(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Synth(a) => suite::synth(a),
        Command::Fisher(a) => commands::fisher(a),
        Command::Scan(a) => commands::scan(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
