mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use facefit::solver::Mode;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "facefit", version, about = "Fit a rigged head model to dense 2D landmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Solver mode; overrides `solve.mode`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Worker threads for residual evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory that relative paths resolve against.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural toy asset and identity prior.
    SynthAsset,
    /// Sample a scene and write observations, rig and ground truth.
    SynthObs,
    /// Fit observations; writes parameters, a report and per-frame OBJ meshes.
    Fit,
    /// Compare fitted parameters with ground truth.
    Eval,
    /// Time the solver over landmark counts and sparsity thresholds.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Offline,
    Tracking,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.map(|m| match m {
            ModeArg::Offline => Mode::Offline,
            ModeArg::Tracking => Mode::Tracking,
        }),
        workers: cli.workers,
        output_dir: cli.output_dir,
    };
    let result = RunConfig::load(cli.config.as_deref(), &overrides).and_then(|config| match cli.command {
        Command::SynthAsset => commands::synth_asset(&config),
        Command::SynthObs => commands::synth_obs(&config),
        Command::Fit => commands::run_fit(&config),
        Command::Eval => commands::run_eval(&config),
        Command::Bench => commands::run_bench(&config),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
