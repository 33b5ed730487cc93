//! `mklab`: cost counting, training, evaluation, gradient checks and
//! attention maps from a JSON run config.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric
//! divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mklab", version, about = "Manifold-key ViT lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (strict JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP report.
    Count {
        #[command(flatten)]
        common: Common,
        /// e.g. `params_M=52,flops_G=11.3`
        #[arg(long)]
        expect: Option<String>,
    },
    /// Train from the config and write metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Top-1/top-5 of a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every parameter, per variant (f64).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negative control: perturb one analytic gradient.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Raw last-layer and rollout class-token maps as PGM files.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample index in the configured dataset.
        #[arg(long, conflicts_with = "image")]
        index: Option<usize>,
        /// Grayscale P5 image of the model's input size.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Comma-separated head indices; all heads when omitted.
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
        /// Layer range `a..b` (or a single layer) used for rollout.
        #[arg(long)]
        layers: Option<String>,
        /// Zero the query projections so every attention map is uniform.
        #[arg(long, hide = true)]
        uniform_attention: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Count { common, expect } => commands::count(&common, expect.as_deref()),
        Command::Train { common } => commands::train(&common),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint),
        Command::Gradcheck {
            common,
            corrupt_gradient,
        } => commands::gradcheck(&common, corrupt_gradient),
        Command::Attnmap {
            common,
            checkpoint,
            index,
            image,
            heads,
            layers,
            uniform_attention,
        } => commands::attnmap(
            &common,
            &commands::AttnmapArgs {
                checkpoint,
                index,
                image,
                heads,
                layers,
                uniform_attention,
            },
        ),
    };
    match result {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("mklab: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
