//! Reproducible runs over the core library: dataset generation, training,
//! evaluation, prediction, timing comparisons and projection diagnostics.

pub mod commands;
pub mod data;
pub mod error;
pub mod io;

pub use error::{CliError, Result};
