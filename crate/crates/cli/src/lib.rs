//! `weightscope` command line.
//!
//! Every subcommand writes into `--out DIR`. JSON reports embed the run
//! manifest; CSV outputs are accompanied by `manifest.json` in the same
//! directory; SVG plots carry it as a comment. Exit codes: 0 success,
//! 1 usage error, 2 data or format error, 3 numerical guard tripped.

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod manifest;
pub mod svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<weightscope::Error> for CliError {
    fn from(e: weightscope::Error) -> Self {
        use weightscope::ErrorKind;
        let code = match e.kind() {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "weightscope", version, about = "Weight-space interpolation and sharpness analysis")]
pub struct Cli {
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train / test_id / test_ood CSVs).
    GenData(GenDataArgs),
    /// Train a model on a CSV dataset.
    Train(TrainArgs),
    /// Build a verified zero-shot / fine-tuned checkpoint pair.
    MakePair(MakePairArgs),
    /// Global interpolation sweep with barrier and regime verdicts.
    Sweep(SweepArgs),
    /// Per-layer interpolation sweeps and straggler detection.
    Layerwise(LayerwiseArgs),
    /// Adaptive average-case sharpness estimate.
    Sharpness(SharpnessArgs),
    /// Monte Carlo sharpness against its second-order expansion.
    AsymptoticCheck(AsymptoticArgs),
    /// Straggler layer pruning followed by before/after sweeps.
    Prune(PruneArgs),
    /// Render curve CSVs as an SVG plot.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// moons or blobs
    #[arg(long, default_value = "moons")]
    pub kind: String,
    /// Rows per split.
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    /// Gaussian noise of the moons generator.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Number of blob classes.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Blob feature dimension.
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    /// Distance between neighbouring blob centers.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// OOD rotation in radians.
    #[arg(long, default_value_t = 0.0)]
    pub rotation: f64,
    /// OOD translation, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub translation: Vec<f64>,
    /// Extra Gaussian jitter on OOD features.
    #[arg(long, default_value_t = 0.0)]
    pub ood_noise: f64,
    /// Fraction of training labels replaced by another class.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training CSV (`f0,…,label`).
    #[arg(long)]
    pub data: PathBuf,
    /// Layers as `name:width:activation,…`; required unless --init is given.
    #[arg(long)]
    pub arch: Option<String>,
    /// Start from this checkpoint instead of a random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakePairArgs {
    /// failure_mode or high_gain
    #[arg(long)]
    pub regime: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairInputs {
    /// Zero-shot checkpoint (the α = 1 end).
    #[arg(long)]
    pub theta0: PathBuf,
    /// Fine-tuned checkpoint (the α = 0 end).
    #[arg(long)]
    pub theta1: PathBuf,
    /// Evaluation CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of evenly spaced α values in [0, 1].
    #[arg(long, default_value_t = weightscope::interp::DEFAULT_GRID_POINTS)]
    pub alphas: usize,
    /// Accuracy gain needed for the high-gain regime.
    #[arg(long, default_value_t = weightscope::metrics::DEFAULT_XI)]
    pub xi: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pair: PairInputs,
    /// Loss-barrier depth threshold.
    #[arg(long, default_value_t = weightscope::metrics::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LayerwiseArgs {
    #[command(flatten)]
    pub pair: PairInputs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SharpnessArgs {
    /// Model to measure (the fine-tuned end when --theta0 is given).
    #[arg(long)]
    pub theta1: PathBuf,
    /// Zero-shot end, needed when --alpha is above 0.
    #[arg(long)]
    pub theta0: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_ITERS)]
    pub iters: usize,
    /// Rows per draw (default: every row).
    #[arg(long)]
    pub m: Option<usize>,
    /// `global` or `layer:NAME`.
    #[arg(long, default_value = "global")]
    pub scope: String,
    /// Interpolation coefficient of the evaluated point.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// elementwise_abs_w or uniform
    #[arg(long, default_value = "elementwise_abs_w")]
    pub scaling: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AsymptoticArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.03,0.01")]
    pub rhos: Vec<f64>,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value = "elementwise_abs_w")]
    pub scaling: String,
    /// Finite-difference step, relative to max(1, |w|) unless --fd-absolute.
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_FD_RELATIVE_STEP)]
    pub fd_step: f64,
    #[arg(long)]
    pub fd_absolute: bool,
    /// Refuse models with more parameters than this.
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_FD_CAP)]
    pub fd_cap: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub pair: PairInputs,
    /// Probability that an entry of a flagged layer is zeroed.
    #[arg(long, default_value_t = weightscope::prune::DEFAULT_P)]
    pub p: f64,
    #[arg(long, default_value_t = weightscope::prune::DEFAULT_SCREEN_ITERS)]
    pub screen_iters: usize,
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = weightscope::sharpness::DEFAULT_ITERS)]
    pub sharpness_iters: usize,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub tau_abs: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tau_rel: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Curve CSV (`alpha,loss,acc`); repeat for several series.
    #[arg(long, required = true)]
    pub curve: Vec<PathBuf>,
    /// Legend label per curve (default: file name).
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long, default_value = "interpolation sweep")]
    pub title: String,
    #[arg(long, default_value_t = weightscope::metrics::DEFAULT_XI)]
    pub xi: f64,
    #[arg(long, default_value_t = weightscope::metrics::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    pool.install(|| commands::dispatch(cli.command))
}
