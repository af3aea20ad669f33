//! Batch experiment driver: dataset creation, pretraining, immunization,
//! attacks, evaluation and numerical analysis, each run leaving a manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use clap::Parser;

pub use commands::{execute, Invocation};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dimlab", version, about = "Immunization experiments on toy conditional diffusion models")]
pub struct Cli {
    /// Worker threads for parallel sections (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Invocation,
}
