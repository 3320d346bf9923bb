mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "latentline", version, about = "Multi-view Bayesian factor analysis for longitudinal multi-task forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a long-format subject table.
    Fit(FitArgs),
    /// Predict output views for the test samples of a fitted model.
    Predict(PredictArgs),
    /// Write a completed long-format table with observed/imputed flags.
    Impute(ImputeArgs),
    /// Inspect a fitted model.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Generate a synthetic longitudinal cohort.
    Synth(SynthArgs),
    /// Run the method-comparison benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct FitArgs {
    /// Long-format CSV: subject_id,month,variable,value.
    #[arg(long)]
    pub data: PathBuf,
    /// Variable catalog CSV (variable,group); defaults to the built-in cohort variables.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Window layout TOML; defaults to 6-month visits, lags -30..-6, test month 36.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Initial number of latent factors; defaults to min(N, total dimension, 50).
    #[arg(long)]
    pub k_init: Option<usize>,
    #[arg(long, default_value_t = 50_000)]
    pub max_iter: usize,
    /// Relative ELBO tolerance of the stopping rule.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Learning-rate override for a 1-based view, `m=rho` or `m=inv`. Repeatable.
    #[arg(long = "lr-view", value_name = "M=RHO|inv")]
    pub lr_view: Vec<String>,
    /// Fit on raw values instead of z-scored ones.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// 1-based views to predict; defaults to the output views.
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum ReportKind {
    /// Per-feature relevance of the views with feature selection.
    Relevance {
        #[arg(long)]
        model: PathBuf,
        /// Restrict to one 1-based view.
        #[arg(long)]
        view: Option<usize>,
        /// Report raw 1/E[gamma] instead of scores normalized to sum 1.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Which latent factors load on which views.
    Factors {
        #[arg(long)]
        model: PathBuf,
        /// Minimum absolute loading for a factor to count as active.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Observed and imputed values of one subject over time.
    Trajectory {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subject: String,
        /// Variables to show; defaults to the output variables.
        #[arg(long, value_delimiter = ',')]
        variables: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct CohortArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Probability that a visit cell is missing at random.
    #[arg(long)]
    pub mcar: Option<f64>,
    /// Probability that a subject drops out before the last visit.
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Long-format CSV of the observed cells.
    #[arg(long)]
    pub out: PathBuf,
    /// Catalog CSV describing the generated variables.
    #[arg(long)]
    pub catalog_out: Option<PathBuf>,
    /// Long-format CSV of every cell before masking.
    #[arg(long)]
    pub complete_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// appendixA (single task, three input subsets) or multitask.
    #[arg(long)]
    pub spec: String,
    /// Synthetic cohort preset; only `default` exists.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<String>,
    /// Long-format CSV to benchmark on instead of synthetic data.
    #[arg(long, requires = "catalog")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Seeds to replicate over.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long)]
    pub k_init: Option<usize>,
    #[arg(long, default_value_t = 50_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// CSV of per-seed results.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("LATENTLINE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("LATENTLINE_THREADS must be a non-negative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Report { kind } => commands::report(&kind),
        Command::Synth(a) => commands::synth(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
