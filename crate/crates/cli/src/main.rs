use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::CliError;

/// Evidence-theoretic ensemble fusion for vibration-based defect detection.
#[derive(Debug, Parser)]
#[command(name = "evifuse", version, about)]
pub struct Cli {
    /// JSON configuration file (`experiment`, `synth` and path keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-sensor |FRF| dataset.
    Synth(SynthArgs),
    /// Select informative frequency lines per channel with the lasso path.
    Select(SelectArgs),
    /// Train one channel learner and optionally score another dataset.
    Train(TrainArgs),
    /// Rank score files against labels and pick ensemble size and θ.
    Rank(RankArgs),
    /// Fuse several classifiers' score files row by row.
    Fuse(FuseArgs),
    /// Run the repeated end-to-end experiment.
    Run(RunArgs),
    /// Repeat the experiment at several noise levels.
    NoiseSweep(SweepArgs),
    /// Repeat the experiment on contiguous frequency sections.
    BandSweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Healthy samples to generate.
    #[arg(long)]
    pub healthy: Option<usize>,
    /// Defected samples to generate.
    #[arg(long)]
    pub defected: Option<usize>,
    /// Number of frequency bins.
    #[arg(long)]
    pub nf: Option<usize>,
    /// Master seed.
    #[arg(long, env = "EVIFUSE_SEED")]
    pub seed: Option<u64>,
    /// Dataset CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Selected-frequency CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Channel name (`x1`, `x2`, `sum`, `product`, `x1_sq`, `x2_sq`, `log_x1`, `log_x2` or `all`).
    #[arg(long)]
    pub channel: String,
    /// Model JSON.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Dataset to score with the trained model.
    #[arg(long, requires = "scores_out")]
    pub predict: Option<PathBuf>,
    /// Score CSV for `--predict`.
    #[arg(long, requires = "predict")]
    pub scores_out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "EVIFUSE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Dataset CSV holding the true labels of the scored samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Score CSV files, one per classifier.
    #[arg(long, num_args = 1.., required = true)]
    pub scores: Vec<PathBuf>,
    /// θ values to sweep.
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    pub theta_grid: Option<Vec<f64>>,
    /// Ranking JSON.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Score CSV files sharing sample ids and classes.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Mixing weight between credibility and support degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    /// Scale of the disagreement transform.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Per-sample trace JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Fused score CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset CSV; the default synthetic dataset is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "EVIFUSE_SEED")]
    pub seed: Option<u64>,
    /// Random train/test repetitions.
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Also run a noise sweep over these NSR levels (percent).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub nsr: Option<Vec<f64>>,
    /// Also run a bandwidth sweep over these section counts.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub bands: Option<Vec<usize>>,
    /// Metrics report JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Plot-ready `repetition,learner,accuracy` CSV.
    #[arg(long)]
    pub plot_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Data(_) => 3,
                CliError::AllFailed(_) => 4,
            })
        }
    }
}
