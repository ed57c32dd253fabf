//! The `tempo` command line: data generation, training, evaluation,
//! rollouts, spectra and ablation sweeps.

pub mod commands;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod run;

pub use error::{CliError, ErrorKind, Result};
