//! Command-line front end: synthetic data, the three training phases,
//! evaluation, cropper comparison and gradient checks.

mod check;
mod config;
mod crop;
mod eval;
mod manifest;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stn_icnn::train::Phase;

#[derive(Parser, Debug)]
#[command(name = "stn-icnn", version, about = "Face parsing with interlinked CNNs and a differentiable cropper")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset in the on-disk dataset layout.
    GenSynth(synth::GenSynthArgs),
    /// Train the coarse labeling network.
    PretrainCoarse(TrainArgs),
    /// Train the localization network on the frozen coarse network.
    PretrainLoc(TrainArgs),
    /// Train every network jointly through the cropper.
    TrainE2e(TrainArgs),
    /// Score a checkpoint on a split and write an F1 report.
    Eval(eval::EvalArgs),
    /// Compare integer-window crops with transformer crops.
    CropCompare(crop::CropArgs),
    /// Run the finite-difference gradient suites.
    GradCheck(check::GradCheckArgs),
}

/// Options shared by the training commands. Every flag has a config-file key
/// of the same name with underscores; flags win.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue this phase from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start this phase from the previous phase's checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_new: Option<f64>,
    #[arg(long)]
    pub lr_pretrained: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub loc_occlusion_prob: Option<f64>,
    /// Keep the coarse and localization networks fixed (joint phase only).
    #[arg(long)]
    pub freeze_stn: bool,
    /// Joint-phase label targets: cropped at the true part windows (truth)
    /// or at the predicted ones (predicted).
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Split used for the periodic held-out score: tuning, test or none.
    #[arg(long)]
    pub eval_split: Option<String>,
    /// Network widths for a fresh model: desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    /// Localization input: softmax or scores.
    #[arg(long)]
    pub encoding: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Failures with a dedicated exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        };
    }
    match err.downcast_ref::<stn_icnn::Error>() {
        Some(stn_icnn::Error::Config(_)) => 1,
        _ => 2,
    }
}

/// Worker cap: `--threads`/config first, then `STN_ICNN_THREADS`.
pub fn init_threads(explicit: Option<usize>) -> anyhow::Result<()> {
    let env = match std::env::var("STN_ICNN_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("STN_ICNN_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    stn_icnn::par::init_threads(explicit.or(env));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynth(a) => synth::run(&a),
        Command::PretrainCoarse(a) => train::run(Phase::Coarse, &a),
        Command::PretrainLoc(a) => train::run(Phase::Locnet, &a),
        Command::TrainE2e(a) => train::run(Phase::EndToEnd, &a),
        Command::Eval(a) => eval::run(&a),
        Command::CropCompare(a) => crop::run(&a),
        Command::GradCheck(a) => check::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
