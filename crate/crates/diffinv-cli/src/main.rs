//! `diffinv`: learn the difference between an image pair as reusable
//! difference tokens and apply them to new query images.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffinv_cli::commands::run::{Stages, run_batch};
use diffinv_cli::commands::{evaluate, grid, sample};
use diffinv_cli::config::{Overrides, RunConfig};
use diffinv_cli::error::Result;

#[derive(Parser)]
#[command(
    name = "diffinv",
    version,
    about = "Difference-token inversion: extract an image edit as reusable tokens \
             and transfer it to new images"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the optimization and generation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite artifacts whose config snapshot does not match.
    #[arg(long, global = true)]
    force: bool,

    /// Backend name: mock, sd21, or sdxl.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Interpolation weight toward the text direction (0 to 1).
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Number of trainable difference tokens.
    #[arg(long, global = true)]
    tokens: Option<usize>,

    /// Weight of the denoising-consistency loss term.
    #[arg(long = "lambda-tc", global = true, value_name = "W")]
    lambda_tc: Option<f64>,

    /// Weight of the embedding-alignment loss term.
    #[arg(long = "lambda-clip", global = true, value_name = "W")]
    lambda_clip: Option<f64>,

    /// Dataset manifest (JSON lines), overriding eval.dataset.
    #[arg(long, global = true, value_name = "FILE")]
    dataset: Option<PathBuf>,

    /// How many triplets to sample, overriding eval.count.
    #[arg(long, global = true, value_name = "N")]
    count: Option<usize>,

    /// Artifact root, overriding output_dir.
    #[arg(long = "output-dir", global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn difference tokens for every sampled triplet.
    Invert,
    /// Apply stored difference tokens to each triplet's query image.
    Generate {
        /// Apply the tokens with flipped sign (the edit's reverse direction).
        #[arg(long)]
        reverse: bool,
    },
    /// Full pipeline: sample, invert, generate, and score.
    Run {
        /// Apply the tokens with flipped sign (the edit's reverse direction).
        #[arg(long)]
        reverse: bool,
    },
    /// Score an existing run directory and write report files.
    Evaluate {
        /// Run directory to score; defaults to the one the config names.
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Compose a summary grid (A | A′ | B | B′ per row) from a run.
    Grid {
        /// Run directory to lay out; defaults to the one the config names.
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Preview the triplet sample for the configured dataset.
    Sample,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&Overrides {
        seed: cli.seed,
        backend: cli.backend.clone(),
        alpha: cli.alpha,
        tokens: cli.tokens,
        lambda_tc: cli.lambda_tc,
        lambda_clip: cli.lambda_clip,
        dataset: cli.dataset.clone(),
        count: cli.count,
        output_dir: cli.output_dir.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Invert => {
            run_batch(&cfg, Stages::INVERT_ONLY, cli.force, false)?;
        }
        Command::Generate { reverse } => {
            run_batch(&cfg, Stages::GENERATE_ONLY, cli.force, *reverse)?;
        }
        Command::Run { reverse } => {
            run_batch(&cfg, Stages::ALL, cli.force, *reverse)?;
        }
        Command::Evaluate { run_dir } => {
            evaluate::evaluate_run(&cfg, run_dir.as_deref(), cli.force)?;
        }
        Command::Grid { run_dir } => {
            grid::grid_run(&cfg, run_dir.as_deref(), cli.force)?;
        }
        Command::Sample => {
            sample::sample_preview(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
