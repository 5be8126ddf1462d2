use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rankchoice::metrics::RankWeights;
use rankchoice::{ContextPolicy, FamilyKind};

mod commands;
mod config;
mod output;

/// Rank-heterogeneous ranked-preference models: synthetic districts,
/// estimation, tuning and evaluation.
#[derive(Parser)]
#[command(name = "rankchoice", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic district and sample train/test rankings.
    Generate(GenerateArgs),
    /// Explode rankings into choice records under a context policy.
    Explode(ExplodeArgs),
    /// Fit a model and write its parameter file and objective trace.
    Fit(FitArgs),
    /// Cross-validate a hyperparameter grid.
    Tune(TuneArgs),
    /// Evaluate a parameter file on held-out rankings.
    Evaluate(EvaluateArgs),
    /// Check forward/backward equivalence numerically.
    EquivCheck(EquivArgs),
    /// Evaluate several parameter files on the same data.
    Compare(CompareArgs),
    /// Pivot metric files into one table per metric.
    PlotData(PlotDataArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "cdm")]
    model: FamilyKind,
    #[arg(long, default_value = "backward")]
    policy: ContextPolicy,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Number of rank strata.
    #[arg(long)]
    strata: Option<usize>,
    /// Laplacian gain between adjacent strata.
    #[arg(long)]
    laplacian: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Embedding rank of the low-rank CDM.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Mini-batch size; full batch when absent.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with optional [train], [district] and [grid] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    common: Common,
    /// Number of households.
    #[arg(long)]
    agents: Option<usize>,
    /// Number of programs.
    #[arg(long)]
    alternatives: Option<usize>,
    #[arg(long)]
    schools: Option<usize>,
    #[arg(long)]
    program_types: Option<usize>,
    /// Fraction of households held out as test data.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, value_enum, default_value = "delimited")]
    format: Format,
}

#[derive(Args)]
struct ExplodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "backward")]
    policy: ContextPolicy,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, value_delimiter = ',')]
    l2_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    rank_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    strata_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    laplacian_grid: Option<Vec<f64>>,
}

#[derive(Args, Clone)]
struct MetricArgs {
    #[arg(long)]
    data: PathBuf,
    /// Largest rank position for accuracy and consistency.
    #[arg(long, default_value_t = 10)]
    max_k: usize,
    /// Sampled choices per household for consistency and τ.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, value_enum, default_value = "hyperbolic")]
    weights: Weights,
    /// Labels to disaggregate by; every label in the data when absent.
    #[arg(long, value_delimiter = ',')]
    group_by: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    params: Vec<PathBuf>,
    /// Display names, one per parameter file; file stems when absent.
    #[arg(long, value_delimiter = ',')]
    names: Option<Vec<String>>,
    #[command(flatten)]
    metrics: MetricArgs,
}

#[derive(Args)]
struct EquivArgs {
    /// Parameter file to check; a random suite runs when absent.
    #[arg(long, requires = "data")]
    params: Option<PathBuf>,
    /// Data supplying the catalog and covariates for --params.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Household whose covariates are used with --params.
    #[arg(long, default_value_t = 0)]
    agent: usize,
    /// Alternative counts for the random suite.
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest acceptable ranking-probability deviation.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// JSON report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Metric files written by evaluate or compare.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Delimited,
    Structured,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Hyperbolic,
    Unit,
}

impl From<Weights> for RankWeights {
    fn from(w: Weights) -> Self {
        match w {
            Weights::Hyperbolic => RankWeights::Hyperbolic,
            Weights::Unit => RankWeights::Unit,
        }
    }
}

const EXIT_PARSE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rankchoice::Error>() {
            return if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            };
        }
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_PARSE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Explode(a) => commands::explode(a),
        Command::Fit(a) => commands::fit(a),
        Command::Tune(a) => commands::tune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::EquivCheck(a) => commands::equiv_check(a),
        Command::Compare(a) => commands::compare(a),
        Command::PlotData(a) => commands::plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
