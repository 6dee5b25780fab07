//! `posecast` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid input or configuration,
//! 4 training divergence.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use posecast::harness::Method;

#[derive(Parser, Debug)]
#[command(name = "posecast", version, about = "Pose-sequence forecasting toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment configuration (TOML). Library defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the data and the training seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a method on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against a dataset.
    Eval(EvalArgs),
    /// Forecast a sequence from one initial pose.
    Forecast(ForecastArgs),
    /// Side-by-side metric table of evaluation reports.
    Compare(CompareArgs),
    /// Run the ablation ladder on the synthetic benchmark.
    Ablate(ExperimentArgs),
    /// Compare the placeholder model against its next-token twin.
    Drift(ExperimentArgs),
    /// Per-timestamp curves as CSV and SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    LinearDrift,
    SinusoidalSwing,
    CircularArc,
    TwoPhase,
    /// Every family, `--n` samples each.
    All,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 45)]
    pub horizon: usize,
    #[arg(long, default_value = "body13")]
    pub topology: String,
    /// Overrides the family's standard noise level.
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ours,
    TfNtp,
    Lstm,
    VqTf,
    NnP,
    NnVl,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::TfNtp => Method::TfNtp,
            MethodArg::Lstm => Method::Lstm,
            MethodArg::VqTf => Method::VqTf,
            MethodArg::NnP => Method::NnP,
            MethodArg::NnVl => Method::NnVl,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Output directory for checkpoints, the JSONL log and the test report.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset-format file whose futures are the forecasts, matched by id.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// PCK threshold; defaults by topology.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Which side of the configured train/test split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-timestamp curve CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Initial pose as comma-separated `x,y` coordinates in joint order.
    #[arg(long, allow_hyphen_values = true)]
    pub p0: String,
    #[arg(long, conflicts_with = "context_ref", required_unless_present = "context_ref")]
    pub label: Option<String>,
    /// Feature-file id, for checkpoints trained on precomputed features.
    #[arg(long)]
    pub context_ref: Option<String>,
    #[arg(long, default_value_t = 45)]
    pub horizon: usize,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out_md: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Seeds to run; each fixes a benchmark draw and a training stream.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Evaluation reports (`.json`) or curve files (`t,ade,pck` CSV).
    #[arg(long, num_args = 1.., required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
