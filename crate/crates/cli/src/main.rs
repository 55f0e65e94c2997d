//! `vidpriv`: generate the synthetic benchmark, train and evaluate the
//! privacy transformer, run ablation sweeps and gradient checks.
//!
//! Logging goes to stderr and is controlled by `VIDPRIV_LOG` (default `info`).

mod commands;
mod gradcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "vidpriv", version, about = "Privacy-preserving action recognition experiments")]
struct Cli {
    /// Experiment config as JSON; the desk preset when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed of the run; the first configured seed when omitted.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic benchmark (manifest.json and samples/) to --out.
    GenData,
    /// Run one training phase, reading the previous phase's checkpoint.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Dataset directory written by gen-data; generated in memory when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint to resume from; defaults to the previous phase's file in --out.
        #[arg(long, value_name = "PATH")]
        from: Option<PathBuf>,
    },
    /// Transform one clip and dump raw, sparsified and transformed frames.
    Transform {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train fresh recognizers on transformed (or raw) videos and print top1,cmap,f1.
    Eval {
        /// Transformer checkpoint; raw videos are used when omitted.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Run a full experiment for each setting of one hyperparameter.
    Ablate {
        #[arg(long, value_enum)]
        sweep: SweepArg,
        /// Override the swept values (comma separated).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Finite-difference check of the full transformer on a small model.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        instances: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Init,
    Adversarial,
    Eval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepArg {
    Alpha,
    Dt,
    Lambda,
}

/// Usage of the subcommand named on the command line, or of the binary.
fn usage_for_args() -> String {
    let mut cmd = Cli::command();
    let name = std::env::args()
        .skip(1)
        .find(|a| cmd.get_subcommands().any(|s| s.get_name() == a.as_str()));
    match name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()) {
        Some(mut sub) => sub.render_usage().to_string().replacen("Usage: ", "Usage: vidpriv ", 1),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for_args());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VIDPRIV_LOG", "info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
