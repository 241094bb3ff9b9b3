//! `ctrpose`: dataset generation, pretraining, self-training, evaluation,
//! gradient checks and servo simulation.
//!
//! Exit status is 0 on success, 1 for invalid arguments or inputs (nothing is
//! written), and 2 when a run fails after starting.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ctrpose", version, about = "Camera-to-robot pose estimation at desk scale")]
struct Cli {
    /// Settings file (TOML or JSON) for the chosen command; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory. Must not exist or be empty. Defaults to runs/<command>-<unix seconds>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample synthetic scenes and write a dataset directory.
    Gen(GenArgs),
    /// Fit the keypoint model to dataset labels.
    Pretrain(PretrainArgs),
    /// Self-train against masks through the renderer.
    Train(TrainArgs),
    /// Report ADD, AUC and PCK of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Simulate closed-loop servoing with a chosen pose estimator.
    Servo(ServoArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Robot description file, or builtin:arm3 / builtin:planar2.
    #[arg(long)]
    robot: Option<String>,
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write mask PNGs.
    #[arg(long)]
    masks: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Recorded in the run manifest.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting checkpoint; without it bumps start at the true keypoints.
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
    /// Systematic per-channel detector error applied to the start (heatmap pixels).
    #[arg(long)]
    gap_px: Option<f64>,
    /// Extra per-scene random error (heatmap pixels).
    #[arg(long)]
    jitter_px: Option<f64>,
    /// Seed for perturbation, mask corruption and training.
    #[arg(long)]
    seed: Option<u64>,
    /// oracle, corrupted or trainable.
    #[arg(long)]
    mask_mode: Option<String>,
    /// Erosion/dilation radius of mask corruption (pixels).
    #[arg(long)]
    radius: Option<usize>,
    /// Per-pixel flip probability of mask corruption.
    #[arg(long)]
    flip_rate: Option<f64>,
    /// Learn only the offsets shared by all scenes.
    #[arg(long)]
    shared_only: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `pretrain` or `train`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// PCK threshold in image pixels.
    #[arg(long)]
    pck_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check every stage.
    #[arg(long, conflicts_with = "stage")]
    all: bool,
    /// Check a single stage.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ServoArgs {
    /// Robot description file, or builtin:arm3 / builtin:planar2.
    #[arg(long)]
    robot: Option<String>,
    /// gt, biased:<meters> or ctrnet:<checkpoint>.
    #[arg(long)]
    estimator: Option<String>,
    /// Fraction of the joint error removed per cycle, in [0, 1].
    #[arg(long)]
    gain: Option<f64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// static or orbit.
    #[arg(long)]
    camera_motion: Option<String>,
    /// Orbit rate about the base z axis (rad/s).
    #[arg(long)]
    orbit_rate: Option<f64>,
    /// Trial seed: start configuration, camera and goal.
    #[arg(long)]
    seed: Option<u64>,
    /// Detector error of the ctrnet estimator (heatmap pixels).
    #[arg(long)]
    gap_px: Option<f64>,
    /// Seed of the detector error; match the `train --seed` of the checkpoint.
    #[arg(long)]
    gap_seed: Option<u64>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("CTRPOSE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("CTRPOSE_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<commands::Status, CliError> {
    init_threads()?;
    let file = cli.config.as_deref();
    let out = cli.out.as_deref();
    match cli.command {
        Command::Gen(a) => commands::gen(a, file, out),
        Command::Pretrain(a) => commands::pretrain(a, file, out),
        Command::Train(a) => commands::train(a, file, out),
        Command::Eval(a) => commands::eval(a, file, out),
        Command::Gradcheck(a) => commands::gradcheck(a, file, out),
        Command::Servo(a) => commands::servo(a, file, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(commands::Status::Success(out)) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Ok(commands::Status::ChecksFailed(out)) => {
            eprintln!("one or more checks failed; see {}", out.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("ctrpose: {e}");
            ExitCode::from(e.code())
        }
    }
}
