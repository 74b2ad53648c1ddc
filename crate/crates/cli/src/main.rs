//! `shim-cp`: exact full conformal prediction for sparse high-order
//! interaction models from the command line.

mod audit;
mod bench;
mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shim_conformal::Error;

#[derive(Parser, Debug)]
#[command(name = "shim-cp", version, about = "Exact full conformal prediction for sparse high-order interaction models")]
struct Cli {
    /// Worker threads for test points and replicates (0 = one per core)
    #[arg(long, global = true, env = "SHIM_CP_WORKERS", default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV
    Generate(GenerateArgs),
    /// Fit the model on a dataset and list the active patterns
    Fit(FitArgs),
    /// Full conformal sets for test points
    Conformal(ConformalArgs),
    /// Split conformal intervals for test points
    Split(SplitArgs),
    /// Method comparison or pruning tables on the synthetic protocols
    Benchmark(bench::BenchmarkArgs),
    /// Compare the exact algorithms against brute-force oracles
    Audit(audit::AuditArgs),
    /// Kink counts per (λ, ζ, d)
    Kinks(KinksArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    /// Five planted terms up to fifth order
    Planted,
    /// z1 + z1z2 + z1z2z3, scaled by --coef
    ThreeTerm,
}

#[derive(Args, Debug, Clone)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Probability that a design entry is zero
    #[arg(long, default_value_t = 0.4)]
    pub zeta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Model::Planted)]
    pub model: Model,
    /// Coefficient of every term for --model three-term
    #[arg(long, default_value_t = 2.0)]
    pub coef: f64,
}

/// Where the labeled rows come from.
#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Training CSV; synthetic data is generated when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML column schema for --data and --test; every column binary when absent
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Response column when no schema is given
    #[arg(long, default_value = "y")]
    pub response: String,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// L1 weight; chosen by cross-validation when absent
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Ridge weight (elastic net when positive)
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub l2: f64,
    /// Maximum interaction order (0 = unlimited)
    #[arg(long, short = 'd', default_value_t = 3)]
    pub max_order: usize,
    /// Enumerate the whole tree instead of pruning
    #[arg(long)]
    pub no_prune: bool,
    /// Folds for cross-validating λ
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output file (stdout when absent)
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TestArgs {
    /// Test CSV with the response column; with synthetic data, extra rows
    /// are generated instead
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Synthetic test points
    #[arg(long, default_value_t = 50)]
    pub test_points: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Write the aggregate report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BudgetArgs {
    /// Search range for the test label, overriding the default
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    /// Tree nodes allowed per path
    #[arg(long)]
    pub node_budget: Option<u64>,
    /// Seconds allowed per path
    #[arg(long)]
    pub time_budget: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct ConformalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    test: TestArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    test: TestArgs,
    /// Share of the labeled rows used for training
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct KinksArgs {
    #[arg(long, value_delimiter = ',', default_value = "1")]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.7,0.9")]
    zeta: Vec<f64>,
    #[arg(long, short = 'd', value_delimiter = ',', default_value = "3,4,5")]
    depths: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    m: usize,
    /// Seeds first, first+1, ...
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    no_prune: bool,
    #[command(flatten)]
    output: OutputArgs,
}

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Config(String),
    Mismatch(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(
                Error::Data(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Dimension { .. }
                | Error::InvalidPattern { .. },
            ) => 3,
            Failure::Core(_) => 4,
            Failure::Mismatch(_) => 5,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Failure::Mismatch(k) => write!(f, "{k} audit trial(s) disagree with the oracles"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("shim-cp: cannot start workers: {e}");
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Conformal(a) => commands::conformal(a),
        Command::Split(a) => commands::split(a),
        Command::Benchmark(a) => bench::run(a),
        Command::Audit(a) => audit::run(a),
        Command::Kinks(a) => commands::kinks(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shim-cp: {e}");
            ExitCode::from(e.code())
        }
    }
}
