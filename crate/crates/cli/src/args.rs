use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "poolal", version, about = "Pool-based active learning experiments")]
pub struct Cli {
    /// key=value config file with [section] headers; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Where datasets, curves, checkpoints and reports are written.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub rng_seed: Option<u64>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (CSV plus class list) and print its partition sizes.
    Generate(GenerateArgs),
    /// Sweep strategies × repetitions and write curves plus a summary table.
    Run(RunArgs),
    /// Compare the supervised and noisy-pool baselines with active learning at full budget.
    Baselines(BaselineArgs),
    /// Host the annotation API with a human as the oracle.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed_per_class: Option<usize>,
    #[arg(long)]
    pub pool_per_class: Option<usize>,
    /// Absolute number of irrelevant pool items.
    #[arg(long, conflicts_with = "irrelevant_fraction")]
    pub irrelevant: Option<usize>,
    /// Irrelevant share of the final pool, in [0, 1).
    #[arg(long)]
    pub irrelevant_fraction: Option<f64>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Minimum distance between class means, in units of the cluster σ.
    #[arg(long)]
    pub separation: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Load this CSV instead of generating synthetic data.
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Class list sidecar (defaults to classes.txt next to the CSV).
    #[arg(long, value_name = "PATH", requires = "data")]
    pub classes_file: Option<PathBuf>,
    /// Number of classes of the synthetic dataset.
    #[arg(long, conflicts_with = "data")]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LoopArgs {
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated iterations at which test accuracy is recorded.
    #[arg(long, value_name = "LIST")]
    pub checkpoints: Option<String>,
    #[arg(long)]
    pub committee_size: Option<usize>,
    /// Retrain after every N acquisitions (and always at checkpoints).
    #[arg(long)]
    pub retrain_every: Option<usize>,
    /// Logarithm base for entropy-based scores.
    #[arg(long)]
    pub log_base: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub l2_penalty: Option<f64>,
    /// Write a resumable loop checkpoint every N iterations.
    #[arg(long)]
    pub save_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub classes: usize,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub looping: LoopArgs,
    /// Comma-separated: lc, ms, es, ve, ce, md, random.
    #[arg(long, value_name = "LIST")]
    pub strategies: Option<String>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Skip finished runs and continue interrupted ones from their checkpoints.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub looping: LoopArgs,
    /// Active learning strategies to include; empty for baselines only.
    #[arg(long, value_name = "LIST")]
    pub strategies: Option<String>,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub looping: LoopArgs,
    #[arg(long)]
    pub bind: Option<SocketAddr>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Built annotation console to serve at /.
    #[arg(long, value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Re-select a query nobody answered within this many seconds.
    #[arg(long, value_name = "SECS")]
    pub query_timeout_secs: Option<u64>,
}
