use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use radarlcd::config::PipelineConfig;
use radarlcd::pipeline::{self, ErrorClass, PipelineError, Run};

/// Radar loop closure detection: simulate, describe, train, detect, close
/// and evaluate over a run directory.
#[derive(Parser)]
#[command(name = "radarlcd", version)]
struct Cli {
    /// TOML configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Accept upstream artifacts stamped with a different config hash.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with revisits.
    Simulate,
    /// Project scans and run the encoder.
    Features,
    /// Select keypoints from the guidance maps.
    Keypoints,
    /// Sample local descriptors at the keypoints.
    Describe,
    /// Fit NetVLAD with the triplet loss.
    Train,
    /// Score held-out pairs with the trained and untrained models.
    Detect,
    /// Score held-out pairs with the Scan Context baseline.
    Scancontext,
    /// Register held-out loop pairs with RANSAC and ICP.
    Close,
    /// Write mAP and pose-error reports.
    Evaluate,
    /// Print the effective configuration.
    Config {
        /// Print as TOML (the only format).
        #[arg(long)]
        dump: bool,
    },
}

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.run_dir {
        cfg.paths.run_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: PipelineConfig) -> Result<String, PipelineError> {
    let run = Run::new(cfg, cli.force)?;
    match cli.command {
        Command::Simulate => pipeline::simulate(&run),
        Command::Features => pipeline::features(&run),
        Command::Keypoints => pipeline::keypoints(&run),
        Command::Describe => pipeline::describe(&run),
        Command::Train => pipeline::train(&run),
        Command::Detect => pipeline::detect(&run),
        Command::Scancontext => pipeline::scancontext(&run),
        Command::Close => pipeline::close(&run),
        Command::Evaluate => pipeline::evaluate(&run),
        Command::Config { .. } => unreachable!("handled before the run is built"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli).context("loading configuration") {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Command::Config { .. } = cli.command {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    match run(&cli, cfg) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Io => EXIT_IO,
                ErrorClass::Numeric => EXIT_NUMERIC,
            })
        }
    }
}
