//! Command-line front end for `trinet`: training, evaluation, sampling,
//! self-checks and density grids, plus the binary model file format.

pub mod commands;
pub mod error;
pub mod model_file;
pub mod pipeline;

use clap::{Parser, Subcommand};

pub use error::{Category, CliError, CliResult};
pub use model_file::{ModelFile, ModelMeta};

#[derive(Debug, Parser)]
#[command(name = "trinet", version, about = "Triangular monotonic flows for density estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a flow and write the model, history CSV and run metadata.
    Train(commands::train::TrainArgs),
    /// Mean NLL (and bits per dimension for image data) of a saved model.
    Eval(commands::eval::EvalArgs),
    /// Draw samples through the inverse flow.
    Sample(commands::sample::SampleArgs),
    /// Gradient, log-determinant and inversion checks on a saved model.
    Check(commands::check::CheckArgs),
    /// Log-density on a 1D or 2D lattice.
    Grid(commands::grid::GridArgs),
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Check(a) => commands::check::run(a),
        Command::Grid(a) => commands::grid::run(a),
    }
}
