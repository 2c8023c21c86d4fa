//! Command-line surface of the `etsim` binary.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "etsim",
    version,
    about = "Trace-driven energy-time tuning for recurring training jobs",
    after_help = "Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 trace validation error.\n\
                  ETSIM_OUT_DIR sets the default output directory when --out is omitted."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace bundle plus its ground-truth sidecar.
    Gen(GenArgs),
    /// Replay a policy over a trace bundle and write per-recurrence results.
    Simulate(SimulateArgs),
    /// Sweep the oracle over eta (and optionally replay over beta) and emit
    /// the grid's Pareto front for plotting.
    Sweep(SweepArgs),
    /// Align the cumulative-regret series of two result files.
    Regret(RegretArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    /// Delimited text with `# manifest` and `# summary` comment lines.
    Csv,
    /// One structured document holding manifest, records, and summary.
    Json,
}

impl OutputFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Parser)]
pub struct GenArgs {
    /// Preset to start from; flags below override individual fields.
    #[arg(long, default_value = "deepspeech2-like")]
    pub preset: String,
    /// Batch size grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub bs: Option<Vec<u32>>,
    /// Power limit grid in watts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pl: Option<Vec<f64>>,
    /// Default batch size.
    #[arg(long)]
    pub b0: Option<u32>,
    /// Device maximum power in watts.
    #[arg(long)]
    pub max_power: Option<f64>,
    /// Epoch cap per run.
    #[arg(long)]
    pub max_epochs: Option<u32>,
    /// Seed replicas per (batch size, slice).
    #[arg(long)]
    pub seeds: Option<u32>,
    /// Number of drift slices.
    #[arg(long)]
    pub slices: Option<u32>,
    /// Relative epoch noise (0 disables it).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Batch size at which the epochs curve bottoms out.
    #[arg(long)]
    pub bstar: Option<u32>,
    /// Epochs-to-target at the optimal batch size.
    #[arg(long)]
    pub epochs_base: Option<f64>,
    /// Curvature of the epochs curve in log batch size.
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Drift change points as slice:new_bstar pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub drift: Option<Vec<String>>,
    /// Generation seed.
    #[arg(long, default_value_t = etsim_core::traceio::SAMPLE_BUNDLE_SEED)]
    pub seed: u64,
    /// Bundle directory to write; defaults to ETSIM_OUT_DIR/<job_id>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct SimulateArgs {
    /// Bundle directory or manifest path.
    #[arg(long)]
    pub trace: PathBuf,
    /// Policy to replay: zeus, grid, or default.
    #[arg(long)]
    pub policy: String,
    /// Energy-vs-time weight in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    /// Early-stop threshold multiplier.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Recurrence count, or `auto` for 2 * |B| * |P|.
    #[arg(long, default_value = "auto")]
    pub recurrences: String,
    /// Cost-history window per arm: a size or `inf`.
    #[arg(long, default_value = "inf")]
    pub window: String,
    /// Replay seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Arrival schedule file (`recurrence,submit_time_s`); omitted means
    /// fully sequential.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Recurrence-to-slice map: `none`, `step` (slice = recurrence), or
    /// comma-separated `recurrence:slice` change points.
    #[arg(long, default_value = "none")]
    pub drift_map: String,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Results file; defaults to ETSIM_OUT_DIR/results-<policy>-seed<seed>.<ext>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct SweepArgs {
    /// Bundle directory or manifest path.
    #[arg(long)]
    pub trace: PathBuf,
    /// Eta grid, comma separated; defaults to 0,0.1,...,1.
    #[arg(long, value_delimiter = ',')]
    pub eta_grid: Option<Vec<f64>>,
    /// Optional beta grid; each beta replays the bandit policy and reports
    /// its total cost relative to beta = 2.
    #[arg(long, value_delimiter = ',')]
    pub beta_grid: Option<Vec<f64>>,
    /// Eta used for the beta replays.
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    /// Recurrence count for the beta replays, or `auto`.
    #[arg(long, default_value = "auto")]
    pub recurrences: String,
    /// Replay seed for the beta replays.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Sweep file; defaults to ETSIM_OUT_DIR/sweep.<ext>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct RegretArgs {
    /// Results files to compare; pass exactly twice (A then B).
    #[arg(long = "results", required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Comparison file; defaults to ETSIM_OUT_DIR/regret.<ext>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
