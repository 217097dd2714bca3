//! Command-line laboratory for preference-optimization experiments over
//! tabular policies: dataset generation, training, diagnostics, and
//! gradient checking, all driven by flat config files.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_diagnose, cmd_gen_data, cmd_gradcheck, cmd_train, CliError, FaultInjection};

#[derive(Parser)]
#[command(
    name = "prefopt",
    about = "Preference-optimization experiments over exactly-enumerable tabular policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Bradley-Terry preference dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a dataset file, writing a trace CSV and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit gradient-weight, perplexity, correlation, and divergence reports.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check all analytic loss gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI against the given argv; returns the process exit code
/// (0 success, 1 check failure, 2 usage or config error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap renders its own message; usage problems are exit 2.
            let _ = e.print();
            return 2;
        }
    };
    let result = match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out),
        Command::Train { config, out } => cmd_train(config, out),
        Command::Diagnose { config, out } => cmd_diagnose(config, out),
        Command::Gradcheck { config, out } => cmd_gradcheck(config, out, None),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
