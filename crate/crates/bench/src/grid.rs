//! Optimizer × batch-size comparison grids.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zolab_core::footprint::OptimizerFamily;
use zolab_core::{Category, PeakBytes};

use crate::config::RunConfig;
use crate::error::{BenchError, Result};
use crate::runner::{run_experiment, Outcome};

pub const OOM: &str = "OOM";
pub const GRID_CSV: &str = "grid.csv";
pub const GRID_JSON: &str = "grid.json";
pub const MEMORY_TABLE: &str = "memory_table.csv";
pub const TIME_TABLE: &str = "time_table.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellResult {
    Fits {
        peak: PeakBytes,
        mean_step_ms: f64,
        final_loss: f64,
    },
    /// Only the failing step: no partial memory figures.
    Oom {
        step: usize,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub optimizer: OptimizerFamily,
    pub batch_size: usize,
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub optimizers: Vec<OptimizerFamily>,
    pub batch_sizes: Vec<usize>,
    pub budget_bytes: Option<u64>,
    pub cells: Vec<Cell>,
}

impl GridReport {
    pub fn cell(&self, optimizer: OptimizerFamily, batch_size: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.optimizer == optimizer && c.batch_size == batch_size)
    }
}

/// The configuration a grid cell runs; also usable for a standalone rerun.
pub fn cell_config(
    base: &RunConfig,
    optimizer: OptimizerFamily,
    batch_size: usize,
    out_dir: Option<&Path>,
) -> RunConfig {
    let mut cfg = base.with_family(optimizer);
    cfg.batch_size = batch_size;
    cfg.out_dir = out_dir.map(|d| cell_dir(d, optimizer, batch_size));
    cfg
}

fn cell_dir(root: &Path, optimizer: OptimizerFamily, batch_size: usize) -> PathBuf {
    root.join("cells").join(format!("{optimizer}_b{batch_size}"))
}

fn run_cell(base: &RunConfig, optimizer: OptimizerFamily, batch_size: usize, out_dir: Option<&Path>) -> Cell {
    let cfg = cell_config(base, optimizer, batch_size, out_dir);
    let result = match run_experiment(&cfg) {
        Ok(report) => match report.outcome {
            Outcome::Ok => CellResult::Fits {
                peak: report.totals.peak,
                mean_step_ms: report.totals.mean_step_ms.unwrap_or(0.0),
                final_loss: report.totals.final_loss.unwrap_or(f64::NAN),
            },
            Outcome::Oom { step } => CellResult::Oom { step },
            Outcome::Numeric { message, .. } => CellResult::Error { message },
        },
        Err(e) => CellResult::Error { message: e.to_string() },
    };
    Cell { optimizer, batch_size, result }
}

/// One independent run per (optimizer, batch size) cell, each with its own
/// ledger. Cell failures are recorded in the cell and the grid continues.
/// With `parallel_cells` the cells run concurrently, which makes their
/// timings interfere.
pub fn compare_grid(
    base: &RunConfig,
    optimizers: &[OptimizerFamily],
    batch_sizes: &[usize],
    parallel_cells: bool,
) -> Result<GridReport> {
    if optimizers.is_empty() || batch_sizes.is_empty() {
        return Err(BenchError::Config("grid needs at least one optimizer and one batch size".into()));
    }
    let out_dir = base.out_dir.as_deref();
    let coords: Vec<(OptimizerFamily, usize)> =
        batch_sizes.iter().flat_map(|&b| optimizers.iter().map(move |&o| (o, b))).collect();
    let cells: Vec<Cell> = if parallel_cells {
        coords.par_iter().map(|&(o, b)| run_cell(base, o, b, out_dir)).collect()
    } else {
        coords.iter().map(|&(o, b)| run_cell(base, o, b, out_dir)).collect()
    };
    let report = GridReport {
        optimizers: optimizers.to_vec(),
        batch_sizes: batch_sizes.to_vec(),
        budget_bytes: base.budget_bytes,
        cells,
    };
    if let Some(dir) = out_dir {
        write_grid(dir, &report)?;
    }
    Ok(report)
}

pub const GRID_HEADER: [&str; 13] = [
    "optimizer",
    "batch_size",
    "status",
    "peak_weights",
    "peak_grads",
    "peak_optstate",
    "peak_activation",
    "peak_transient",
    "peak_total",
    "mean_step_ms",
    "final_loss",
    "oom_step",
    "error",
];

fn grid_row(c: &Cell) -> Vec<String> {
    let mut row = vec![c.optimizer.to_string(), c.batch_size.to_string()];
    match &c.result {
        CellResult::Fits { peak, mean_step_ms, final_loss } => {
            row.push("fits".into());
            for cat in
                [Category::Weights, Category::Grads, Category::OptState, Category::Activation, Category::Transient]
            {
                row.push(peak.get(cat).to_string());
            }
            row.push(peak.total.to_string());
            row.push(mean_step_ms.to_string());
            row.push(final_loss.to_string());
            row.push(String::new());
            row.push(String::new());
        }
        CellResult::Oom { step } => {
            row.push(OOM.into());
            row.extend(std::iter::repeat_n(OOM.to_string(), 8));
            row.push(step.to_string());
            row.push(String::new());
        }
        CellResult::Error { message } => {
            row.push("error".into());
            row.extend(std::iter::repeat_n(String::new(), 9));
            row.push(message.clone());
        }
    }
    row
}

fn pivot(report: &GridReport, value: impl Fn(&CellResult) -> String) -> Vec<Vec<String>> {
    let mut rows = vec![std::iter::once("batch_size".to_string())
        .chain(report.optimizers.iter().map(|o| o.to_string()))
        .collect::<Vec<_>>()];
    for &b in &report.batch_sizes {
        let mut row = vec![b.to_string()];
        for &o in &report.optimizers {
            row.push(report.cell(o, b).map_or_else(String::new, |c| value(&c.result)));
        }
        rows.push(row);
    }
    rows
}

/// Peak total bytes per cell, `OOM` where the cell ran out of memory.
pub fn memory_table(report: &GridReport) -> Vec<Vec<String>> {
    pivot(report, |r| match r {
        CellResult::Fits { peak, .. } => peak.total.to_string(),
        CellResult::Oom { .. } => OOM.into(),
        CellResult::Error { .. } => "error".into(),
    })
}

/// Mean per-step milliseconds per cell, `OOM` where the cell ran out of memory.
pub fn time_table(report: &GridReport) -> Vec<Vec<String>> {
    pivot(report, |r| match r {
        CellResult::Fits { mean_step_ms, .. } => mean_step_ms.to_string(),
        CellResult::Oom { .. } => OOM.into(),
        CellResult::Error { .. } => "error".into(),
    })
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn write_grid(dir: &Path, report: &GridReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let header = GRID_HEADER.iter().map(|s| s.to_string()).collect();
    write_rows(&dir.join(GRID_CSV), std::iter::once(header).chain(report.cells.iter().map(grid_row)))?;
    write_rows(&dir.join(MEMORY_TABLE), memory_table(report))?;
    write_rows(&dir.join(TIME_TABLE), time_table(report))?;
    let path = dir.join(GRID_JSON);
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| BenchError::io(&path, e))
}
