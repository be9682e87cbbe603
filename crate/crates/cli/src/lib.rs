//! Configuration-driven experiment runner: dataset generation, model
//! fitting, POLAR training, baselines and evaluation over a `(p, n, c)` grid,
//! written to `results.csv` with a resume manifest.

pub mod config;
pub mod error;
pub mod experiment;
pub mod results;

pub use config::{ExperimentConfig, Preset};
pub use error::CliError;
pub use experiment::{run_cell, run_experiment, RunSummary, SharedContext};
pub use results::{CellKey, ResultRow};
