//! Command-line entry point.

use clap::{Parser, Subcommand};
use neural_npv::cli::{dispatch, load_config, Command, DispatchArgs, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "neural-npv",
    about = "Learn and verify parameter-dependent controllers and Lyapunov certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON run configuration; defaults apply for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Trained checkpoint (needed by verify/simulate/roa).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Verification sample-count override.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Exit nonzero when a required verification threshold fails.
    #[arg(long, global = true)]
    require: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the LQR gain schedule and fit the controller to it.
    Pretrain,
    /// Run both training stages, checkpointing after each.
    Train,
    /// Adversarial attack campaign over the certified level set.
    VerifyPgd,
    /// Trajectory convergence and monotonicity sweep.
    VerifyTraj,
    /// Write demo trajectories from level-set initial states.
    Simulate,
    /// Level-set membership grid (CSV + SVG slice).
    Roa,
}

fn main() -> ExitCode {
    neural_npv::init_thread_pool_from_env();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::pendulum_default(),
    };
    let command = match cli.command {
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Train => Command::Train,
        Cmd::VerifyPgd => Command::VerifyPgd,
        Cmd::VerifyTraj => Command::VerifyTraj,
        Cmd::Simulate => Command::Simulate,
        Cmd::Roa => Command::Roa,
    };
    let args = DispatchArgs {
        command,
        config,
        checkpoint: cli.checkpoint,
        out_dir: cli.out,
        seed_override: cli.seed,
        samples_override: cli.samples,
        require: cli.require,
    };
    match dispatch(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
