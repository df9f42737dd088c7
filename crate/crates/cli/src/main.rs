//! `xvwm`: dataset generation, training, evaluation, rollouts and the
//! imagination service behind one command.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use xvwm_core::XvwmError;
use xvwm_serve::ServeError;

#[derive(Parser, Debug)]
#[command(name = "xvwm", version, about = "Cross-view world model lab")]
pub struct Cli {
    /// TOML config with world, render, dataset, model, scheme, train, eval and serve sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory that receives run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset of simulated multi-view episodes.
    GenData(GenDataArgs),
    /// Train a model under a view scheme.
    Train(TrainArgs),
    /// Top-down marker localization from each input view.
    EvalLoc(EvalArgs),
    /// Frame-by-frame top-down trajectory trace over one episode.
    EvalTraj(TrajArgs),
    /// Generate the first-person view from the top-down map alone.
    EvalSpawn(EvalArgs),
    /// Pixel metrics for every input/output view pair.
    EvalMatrix(EvalArgs),
    /// Compare checkpoints trained with different first-person exposure.
    TransferStudy(TransferArgs),
    /// Autoregressive same-view generation fed back as context.
    Rollout(RolloutArgs),
    /// Run the imagination service.
    Serve(ServeArgs),
    /// Summarize a dataset directory, episode file or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Seed for episode starts, policies, skies and the split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write here instead of `<run>/dataset`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory; not needed with --dry-run.
    #[arg(long, required_unless_present = "dry_run")]
    pub data: Option<PathBuf>,
    /// single-view, two-view or four-view.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint with saved optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the sampled view-pair frequencies and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    CopyLastOutputView,
    CopyLastContext,
    ConstantGray,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("predictor").required(true).args(["checkpoint", "oracle", "baseline"])))]
pub struct PredictorArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the simulator itself as the predictor.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate only the first N test episodes.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip the reference baselines normally reported alongside.
    #[arg(long)]
    pub no_baselines: bool,
}

#[derive(Args, Debug)]
pub struct TrajArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Test episode id; defaults to the first test episode.
    #[arg(long)]
    pub episode: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Checkpoints to compare, each with saved training state.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub episode: Option<u64>,
    #[arg(long, default_value = "ego")]
    pub view: String,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("backend").required(true).args(["checkpoint", "oracle"])))]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Machine-parsable class of an error chain.
fn classify(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<XvwmError>() {
            return x.class();
        }
        if let Some(x) = cause.downcast_ref::<ServeError>() {
            return match x {
                ServeError::Core(c) => c.class(),
                ServeError::Io(_) => "io",
                ServeError::Encoding(_) => "format",
                ServeError::WorkerGone => "runtime",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "runtime"
}

fn exit_code(class: &str) -> u8 {
    match class {
        "usage" => 2,
        "config" => 3,
        "format" => 4,
        "io" | "startup" => 5,
        "numeric" => 6,
        _ => 1,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = classify(&e);
            eprintln!("error: {class}: {}", one_line(&format!("{e:#}")));
            ExitCode::from(exit_code(class))
        }
    }
}
