mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Randomization-based inference for inexactly matched observational studies.
#[derive(Debug, Parser)]
#[command(name = "riim", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Input CSV (header: set_id, z, y [, d] [, e_hat] [, p_hat], x1..xK).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output path; a `<out>.manifest.json` is written beside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (simulation only; the other commands are deterministic).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Regularise probabilities: any set with a probability within gamma of
    /// 0 or 1 falls back to m_i / n_i.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Clamp threshold for propensities used by the unmatched weighting
    /// estimator.
    #[arg(long, global = true)]
    pub clamp_rho: Option<f64>,
    #[arg(long, global = true, value_parser = ["unit", "weights", "covmeans"])]
    pub q: Option<String>,
    #[arg(long, global = true, value_parser = ["uniform", "plugin", "oracle-file"])]
    pub prob_source: Option<String>,
    /// Propensity learner; `external` reads the `e_hat` column. Defaults to
    /// `external` when the input has `e_hat`, otherwise `gbm`.
    #[arg(long, global = true, value_parser = ["logistic", "gbm", "external"])]
    pub learner: Option<String>,
    #[arg(long, global = true)]
    pub gbm_rounds: Option<usize>,
    #[arg(long, global = true)]
    pub gbm_depth: Option<usize>,
    #[arg(long, global = true)]
    pub gbm_eta: Option<f64>,
    #[arg(long, global = true)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Average treatment effect from a matched dataset (JSON report).
    AnalyzeAte {
        /// Any of dim, ippw, fpw.
        #[arg(long, value_delimiter = ',', default_value = "dim,ippw")]
        estimator: Vec<String>,
    },
    /// Effect ratio from a matched instrumental-variable dataset (JSON report).
    AnalyzeIv {
        /// Any of classical, bc.
        #[arg(long, value_delimiter = ',', default_value = "classical,bc")]
        estimator: Vec<String>,
        /// Also scan the confidence set on a grid, e.g. `-5,5`.
        #[arg(long, allow_hyphen_values = true)]
        grid_range: Option<String>,
        #[arg(long, default_value_t = 2001)]
        grid_points: usize,
    },
    /// Optimal full matching on estimated propensity scores.
    Match {
        /// Largest allowed |e_hat difference| within a set.
        #[arg(long)]
        caliper: Option<f64>,
        #[arg(long, default_value_t = 8)]
        max_set_size: usize,
        /// Where to list excluded units (default `dropped.csv` beside --out).
        #[arg(long)]
        dropped: Option<PathBuf>,
    },
    /// Monte-Carlo study; writes the summary CSV to --out.
    Simulate {
        /// key = value settings applied before the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["ate", "iv"])]
        study: Option<String>,
        #[arg(long, value_parser = ["1", "2"])]
        model: Option<String>,
        #[arg(long, value_parser = ["on", "off"])]
        caliper: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated estimator names.
        #[arg(long)]
        estimators: Option<String>,
        #[arg(long)]
        max_set_size: Option<usize>,
        /// Per-replication CSV.
        #[arg(long)]
        replications: Option<PathBuf>,
        /// Worker threads (default: available cores). Does not affect output.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Covariate balance table (covariate, smd_pre, smd_post, degenerate).
    Balance {
        /// Unmatched table used for the pre-matching columns and the pooled SD.
        #[arg(long)]
        pre: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
