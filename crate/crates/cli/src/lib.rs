//! Command-line front end for the `ftlab` library.

pub mod commands;
pub mod config;
pub mod experiment;

pub use commands::{exit_code, run, Cli, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use config::{ExperimentConfig, SplitSize, EXPERIMENT_VERSION};
pub use experiment::{run_experiment, CellResult, ExperimentReport, SummaryRow};
