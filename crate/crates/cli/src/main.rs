//! `ifa` — exploratory item factor analysis for graded response data,
//! estimated by amortized importance-weighted variational inference.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ifa_core::Error;

#[derive(Parser)]
#[command(
    name = "ifa",
    version,
    about = "Exploratory item factor analysis for graded responses via amortized importance-weighted variational inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the model to a response CSV and write the fitted-model file.
    Fit(FitArgs),
    /// Draw a synthetic dataset from a generating-parameter template or file.
    Simulate(SimulateArgs),
    /// Fit a range of latent dimensions and emit the scree curve CSV.
    Scree(ScreeArgs),
    /// Emit MAP factor scores for a dataset under a fitted model.
    Score(ScoreArgs),
    /// Geomin-rotate a fitted model's loadings.
    Rotate(RotateArgs),
    /// Rotate two fitted models and test them for equivalence.
    Compare(CompareArgs),
    /// Run a simulate-fit-rotate-align replication study.
    Replicate(ReplicateArgs),
}

/// Fit hyperparameters shared by every command that trains models. Flags
/// override values from `--config`.
#[derive(Args, Clone)]
struct FitFlags {
    /// JSON file with flat FitConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of latent factors P.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Importance-weighted samples R.
    #[arg(long)]
    iw_samples: Option<usize>,
    /// Monte Carlo samples S.
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Mini-batch size M.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// KL annealing iterations tau.
    #[arg(long)]
    anneal_iters: Option<usize>,
    /// Convergence window length.
    #[arg(long)]
    window: Option<usize>,
    /// Non-improving window comparisons before stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Importance-weight definition: algorithm1 or pointwise.
    #[arg(long)]
    weight_mode: Option<String>,
    /// Overrides the mean-of-layer-sizes hidden width rule.
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Logistic scaling constant D.
    #[arg(long)]
    scaling_d: Option<f64>,
    /// Independent optimization runs; the best full-data IW-ELBO wins.
    #[arg(long)]
    fit_starts: Option<usize>,
}

#[derive(Args)]
struct DataFlags {
    /// Response CSV: integer codes 0..C_j-1, optional header line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Category counts override: one integer per item ("5,5,3,...") or a
    /// single integer broadcast to all items.
    #[arg(long)]
    categories: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    fit: FitFlags,
    /// Debug: dump per-respondent log importance weights (one full-data
    /// evaluation pass after fitting) to log_weights.csv.
    #[arg(long)]
    dump_log_weights: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in design: "five-factor" (P=5, J=50, C=5) or "binary"
    /// (P=10, two-category items).
    #[arg(long)]
    template: Option<String>,
    /// Generating-parameter JSON file (alternative to --template).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Number of respondents to draw.
    #[arg(long)]
    n: usize,
    /// Item count for the binary template (multiple of 50, at least 100).
    #[arg(long, default_value_t = 100)]
    j_items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the true factor scores.
    #[arg(long)]
    with_scores: bool,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScreeArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long)]
    p_min: Option<usize>,
    #[arg(long)]
    p_max: Option<usize>,
    /// Explicit ascending list, e.g. "2,3,4,5".
    #[arg(long)]
    p_list: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    holdout_fraction: f64,
    /// Importance samples for holdout evaluation.
    #[arg(long, default_value_t = 5000)]
    eval_samples: usize,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Rotation solution JSON; scores are carried into the rotated basis.
    #[arg(long)]
    rotation: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct RotationFlags {
    #[arg(long, default_value_t = 0.01)]
    geomin_epsilon: f64,
    #[arg(long, default_value_t = 30)]
    starts: usize,
    #[arg(long, default_value_t = 1e-5)]
    rotation_tol: f64,
    #[arg(long, default_value_t = 500)]
    rotation_max_iter: usize,
}

#[derive(Args)]
struct RotateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    rotation: RotationFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[command(flatten)]
    rotation: RotationFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Respondents per replication.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    replications: usize,
    #[arg(long, default_value_t = 100)]
    j_items: usize,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    rotation: RotationFlags,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn thread_cap(requested: Option<usize>) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut jobs = requested.unwrap_or(available);
    if let Ok(cap) = std::env::var("IFA_THREADS") {
        if let Ok(cap) = cap.parse::<usize>() {
            jobs = jobs.min(cap.max(1));
        }
    }
    jobs.max(1)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit(); // exits 0
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };

    let jobs = match &cli.command {
        Cmd::Scree(a) => thread_cap(a.jobs),
        Cmd::Replicate(a) => thread_cap(a.jobs),
        _ => thread_cap(None),
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();

    let outcome = match cli.command {
        Cmd::Fit(args) => commands::cmd_fit(args),
        Cmd::Simulate(args) => commands::cmd_simulate(args),
        Cmd::Scree(args) => commands::cmd_scree(args),
        Cmd::Score(args) => commands::cmd_score(args),
        Cmd::Rotate(args) => commands::cmd_rotate(args),
        Cmd::Compare(args) => commands::cmd_compare(args),
        Cmd::Replicate(args) => commands::cmd_replicate(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// Exit taxonomy: 1 usage, 2 data, 3 numerical.
fn exit_code(e: &Error) -> i32 {
    if matches!(e, Error::Config(_)) {
        1
    } else if e.is_numerical_error() {
        3
    } else {
        2
    }
}
