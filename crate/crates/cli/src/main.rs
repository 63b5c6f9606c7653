//! `blurry-edges`: synthesize scenes, estimate depth, evaluate and calibrate.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use blurry_edges::fit::Profile;

#[derive(Debug, Parser)]
#[command(
    name = "blurry-edges",
    version,
    about = "Depth from defocus with blurry-edge patches"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Objective profile; also resets the loss weights to that profile's defaults.
    #[arg(long, global = true)]
    profile: Option<Profile>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Number of scenes, overriding the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Estimate depth from an image pair or from every scene of a dataset.
    Depth(commands::DepthArgs),
    /// Compare predicted depth maps against ground truth.
    Eval {
        /// Directory written by `depth`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory written by `synth` (or holding a single `depth.f32`).
        #[arg(long)]
        gt: PathBuf,
    },
    /// Fit a linear depth correction to measured pairs.
    Calibrate {
        /// CSV with `predicted,truth` columns.
        #[arg(long)]
        input: PathBuf,
    },
    /// Render a wedge patch JSON for inspection.
    Render {
        #[arg(long)]
        patch: PathBuf,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("BE_LOG", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn run(cli: Cli) -> Result<()> {
    let cfg = commands::effective_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        blurry_edges::par::set_threads(n)?;
    }
    let out = &cli.global.out;
    match cli.command {
        Command::Synth { count } => commands::synth(cfg, count, out),
        Command::Depth(args) => commands::depth(cfg, &args, out),
        Command::Eval { pred, gt } => commands::eval(cfg, &pred, &gt, out),
        Command::Calibrate { input } => commands::calibrate(cfg, &input, out),
        Command::Render { patch } => commands::render(cfg, &patch, out),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
