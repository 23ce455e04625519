use std::path::PathBuf;

use bodl::EmbeddingOp;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bodl", version, about = "Bayesian online deep probit CTR models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train in one chronological pass, scoring every example before it updates the model
    Train(TrainArgs),
    /// Report AUC, logloss and calibration ratio on labeled data
    Evaluate(EvalArgs),
    /// Write one calibrated click probability per input line
    Predict(PredictArgs),
    /// Summarize a checkpoint
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Rounds,
    Async,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training data, `LABEL FIELD:FEATURE ...` per line (`.gz` accepted)
    #[arg(long)]
    pub data: PathBuf,

    /// Continue training from this checkpoint; model flags are then ignored
    #[arg(long)]
    pub model_in: Option<PathBuf>,

    #[arg(long)]
    pub model_out: PathBuf,

    /// Embedding operation
    #[arg(long, default_value = "copy")]
    pub op: EmbeddingOp,

    /// Embedding dimension
    #[arg(long, default_value_t = 1)]
    pub k: usize,

    /// Number of fields; inferred from the data when omitted
    #[arg(long)]
    pub f: Option<usize>,

    /// Hidden layer sizes, e.g. `64,32`
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,

    #[arg(long, default_value_t = 0.01)]
    pub prior_variance: f64,

    /// Keep each non-click with this probability
    #[arg(long, default_value_t = 1.0)]
    pub neg_rate: f64,

    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    /// Minibatches per worker message
    #[arg(long, default_value_t = 1)]
    pub sync_cadence: usize,

    /// ADF passes over each minibatch
    #[arg(long, default_value_t = 1)]
    pub replay: usize,

    #[arg(long, default_value_t = bodl::data::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,

    #[arg(long, value_enum, default_value = "rounds")]
    pub schedule: ScheduleArg,

    /// Variance decay rate toward the prior; 0 disables decay
    #[arg(long, default_value_t = 0.0)]
    pub decay_eps: f64,

    /// Updates between decay sweeps
    #[arg(long, default_value_t = 1_000_000)]
    pub decay_every: u64,

    /// Seeds weight initialization and negative sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Progressive-validation log, one key=value record per line
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,

    /// Examples per progressive-validation window
    #[arg(long, default_value_t = 10_000)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub model_in: PathBuf,

    /// Score with the raw training-distribution probability
    #[arg(long)]
    pub no_calibrate: bool,

    /// Also write the metrics record here
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Instances with or without a leading label
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub model_in: PathBuf,

    /// Scores file; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long)]
    pub no_calibrate: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model_in: PathBuf,
}
