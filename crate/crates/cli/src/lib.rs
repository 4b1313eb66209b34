//! Command-line front end: PLY and dataset I/O, checkpoints, and the
//! subcommands of the `sfgs` binary.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod ply;
pub mod report;
pub mod split;

pub use error::{CliError, Result};
