//! Experiment harness: synthetic data, run configuration, the training loop
//! with per-step memory and timing records, comparison grids and estimator
//! diagnostics.

pub mod config;
pub mod data;
pub mod error;
pub mod grad_check;
pub mod grid;
pub mod probe_stats;
pub mod runner;

pub use config::{ConfigMap, OptimizerSpec, RunConfig};
pub use error::{BenchError, Result};
pub use grid::{compare_grid, CellResult, GridReport};
pub use runner::{run_experiment, Outcome, RunReport, Totals};
