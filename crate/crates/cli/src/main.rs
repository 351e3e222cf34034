//! `jointcast`: train, forecast, evaluate and check the path-averaging bound.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or validation
//! errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config or inputs that fail validation.
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "jointcast", version, about = "Joint time-series forecasting toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model with masked-token prediction.
    Train(TrainArgs),
    /// Forecast a series from a checkpoint.
    Forecast(ForecastArgs),
    /// Benchmark a checkpoint over DCoT lengths and lookback ensembles.
    Eval(EvalArgs),
    /// Tabulate the sample-path averaging bound against simulation.
    Lemma(LemmaArgs),
    /// Write a synthetic series as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// CSV input with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Value column(s) to read.
    #[arg(long = "column", value_delimiter = ',')]
    pub columns: Vec<String>,
    #[arg(long)]
    pub timestamp_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub tail_mask_prob: Option<f64>,
    /// Plain encoder stack without merges and skips.
    #[arg(long)]
    pub vanilla: bool,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Extra points predicted beyond the horizon and discarded.
    #[arg(long)]
    pub dcot: Option<usize>,
    /// Lookbacks for the mirror ensemble, e.g. `64,128`.
    #[arg(long, value_delimiter = ',')]
    pub lookbacks: Vec<usize>,
    /// Sort each point's quantiles ascending.
    #[arg(long)]
    pub sort: bool,
    /// Output CSV (defaults to `<out-dir>/forecast.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seasonality: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub dcot_grid: Vec<usize>,
    /// Ensemble cells separated by `;`, lookbacks by `,`: `128,256;64,128,256`.
    #[arg(long)]
    pub ensembles: Option<String>,
    #[arg(long)]
    pub score_components: bool,
    #[arg(long)]
    pub geometric: bool,
    #[arg(long)]
    pub max_windows: Option<usize>,
    /// Second checkpoint to compare against (e.g. vanilla vs U-shape).
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    #[arg(long, value_delimiter = ',')]
    pub n_paths: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f64>,
    #[arg(long)]
    pub eps_points: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Uniform(-1, 1) steps instead of ±1.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["sine", "mixture", "walk"])]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub trend: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output CSV (defaults to `<out-dir>/synth.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
