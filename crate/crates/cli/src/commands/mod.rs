//! Subcommands. Each exposes its clap arguments and a `run` entry point;
//! the ones with a structured result also expose it for programmatic use.

pub mod check;
pub mod eval;
pub mod grid;
pub mod sample;
pub mod train;
