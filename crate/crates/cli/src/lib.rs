//! Experiment runner for the `halvingpool` library: top-k sweeps,
//! gradient checks, operation-count tables and toy training, all emitting
//! CSV.

pub mod bench;
pub mod commands;
pub mod config;
pub mod suite;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{read_options, BenchOptions, ComplexityOptions, ConfigError, GradCheckOptions, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "halvingpool", version, about = "Successive halving top-k experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Quality and timing of the top-k operators on random matrices.
    TopkBench(BenchOptions),
    /// Compare every gradient with finite differences.
    GradCheck(GradCheckOptions),
    /// Multiplication counts of two architectures and their ratios.
    Complexity(ComplexityOptions),
    /// Train a pooled model on the needle task.
    TrainToy(TrainOptions),
}

fn layered<T: DeserializeOwned + Default>(config: &Option<PathBuf>) -> Result<T, ConfigError> {
    read_options(config.as_deref())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Configuration errors exit with 2, failed checks with 1.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::TopkBench(o) => layered(&o.config)
            .and_then(|f| o.merge(f).validate())
            .map(|c| commands::topk_bench(&c)),
        Command::GradCheck(o) => layered(&o.config)
            .and_then(|f| o.merge(f).validate())
            .map(|c| commands::grad_check(&c)),
        Command::Complexity(o) => layered(&o.config)
            .and_then(|f| o.merge(f).validate())
            .map(|c| commands::complexity(&c)),
        Command::TrainToy(o) => layered(&o.config)
            .and_then(|f| o.merge(f).validate())
            .map(|c| commands::train(&c)),
    };
    match result {
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            1
        }
        Ok(Ok(code)) => code,
    }
}
