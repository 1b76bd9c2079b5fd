//! Training loop, per-step records and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zolab_core::{
    derivative_train_step, init_model, AllocationLedger, Category, DerivConfig, DerivOptimizer, Dtype, Error,
    ModelObjective, PeakBytes, Scalar, StepRecord, Transformer, ZoOptimizer,
};

use crate::config::{OptimizerSpec, RunConfig};
use crate::data::{generate_dataset, load_csv, Dataset};
use crate::error::{BenchError, Result};

pub const STEPS_CSV: &str = "steps.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const LOSS_DAT: &str = "loss.dat";

pub const CSV_HEADER: [&str; 10] = [
    "step",
    "loss",
    "loss_evaluations",
    "elapsed_ms",
    "peak_weights",
    "peak_grads",
    "peak_optstate",
    "peak_activation",
    "peak_transient",
    "peak_total",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    /// Simulated out-of-memory at this (1-based) step. Setup allocations
    /// count towards step 1.
    Oom {
        step: usize,
    },
    Numeric {
        step: usize,
        message: String,
    },
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Oom { .. } => 3,
            Outcome::Numeric { .. } => 4,
        }
    }
}

/// Aggregates recomputable from the step rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub steps_completed: usize,
    pub loss_evaluations: usize,
    /// Sum of per-step elapsed times.
    pub wall_ms: f64,
    /// Mean step time excluding the first (warm-up) step, or the only step.
    pub mean_step_ms: Option<f64>,
    pub min_step_ms: Option<f64>,
    pub max_step_ms: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Per-category maximum over steps.
    pub peak: PeakBytes,
}

impl Totals {
    pub fn from_steps(steps: &[StepRecord]) -> Self {
        let timed: &[StepRecord] = if steps.len() > 1 { &steps[1..] } else { steps };
        let times = timed.iter().map(|s| s.elapsed_ms);
        let mean = if timed.is_empty() { None } else { Some(times.clone().sum::<f64>() / timed.len() as f64) };
        Totals {
            steps_completed: steps.len(),
            loss_evaluations: steps.iter().map(|s| s.loss_evaluations).sum(),
            wall_ms: steps.iter().map(|s| s.elapsed_ms).sum(),
            mean_step_ms: mean,
            min_step_ms: times.clone().reduce(f64::min),
            max_step_ms: times.reduce(f64::max),
            initial_loss: steps.first().map(|s| s.loss),
            final_loss: steps.last().map(|s| s.loss),
            peak: steps.iter().fold(PeakBytes::default(), |acc, s| acc.max(&s.peak)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub dtype: Dtype,
    pub param_count: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub totals: Totals,
    pub environment: Environment,
    pub steps: Vec<StepRecord>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let m = &cfg.model;
    match &cfg.data.csv {
        Some(path) => load_csv(path, m.vocab_size, m.seq_len, m.classes),
        None => generate_dataset(cfg.data.task, cfg.data.size, m.vocab_size, m.seq_len, cfg.data.seed),
    }
}

/// Runs the configured loop and, when `out_dir` is set, writes the step CSV,
/// the JSON summary and the loss trajectory there. Out-of-memory and numeric
/// failures end the run early and are recorded in the report.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    if data.batches(cfg.batch_size) == 0 {
        return Err(BenchError::Config(format!(
            "dataset of {} rows cannot fill a batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let (steps, outcome) = match cfg.model.dtype {
        Dtype::F32 => train::<f32>(cfg, &data)?,
        Dtype::F64 => train::<f64>(cfg, &data)?,
        Dtype::F16 => unreachable!("rejected by model validation"),
    };
    let report = RunReport {
        config: cfg.clone(),
        outcome,
        totals: Totals::from_steps(&steps),
        environment: Environment {
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            dtype: cfg.model.dtype,
            param_count: cfg.model.param_count(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        steps,
    };
    if let Some(dir) = &cfg.out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

fn classify(err: Error, step: usize) -> Result<Outcome> {
    if err.is_oom() {
        return Ok(Outcome::Oom { step });
    }
    match err {
        Error::Numeric { .. } => Ok(Outcome::Numeric { step, message: err.to_string() }),
        other => Err(other.into()),
    }
}

fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> Result<(Vec<StepRecord>, Outcome)> {
    let ledger = AllocationLedger::with_optional_budget(cfg.budget_bytes);
    let model = Transformer::new(cfg.model)?;
    let mut params = match init_model::<T>(&cfg.model, cfg.model_seed, &ledger) {
        Ok(p) => p,
        Err(e) => return Ok((Vec::new(), classify(e, 1)?)),
    };

    enum Opt<T> {
        Zo(ZoOptimizer),
        Deriv(DerivOptimizer<T>),
    }
    let mut opt = match cfg.optimizer {
        OptimizerSpec::Mezo(z) => Opt::Zo(ZoOptimizer::new(z)?),
        OptimizerSpec::Adam(a) => Opt::Deriv(DerivOptimizer::new(DerivConfig::Adam(a))?),
        OptimizerSpec::Sgd { lr } => Opt::Deriv(DerivOptimizer::new(DerivConfig::Sgd { lr })?),
    };

    let mut records = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let step = i + 1;
        let batch = data.batch(i, cfg.batch_size)?;
        let obj = ModelObjective::new(&model, &batch, &ledger);
        let rec = match &mut opt {
            Opt::Zo(z) => z.step(&obj, &mut params, step, &ledger),
            Opt::Deriv(d) => derivative_train_step(d, &obj, &mut params, step, &ledger),
        };
        match rec {
            Ok(r) if !r.loss.is_finite() => {
                let message = format!("non-finite loss {} at step {step}", r.loss);
                return Ok((records, Outcome::Numeric { step, message }));
            }
            Ok(r) => records.push(r),
            Err(e) => return Ok((records, classify(e, step)?)),
        }
    }
    debug_assert_eq!(ledger.current(Category::Activation), 0);
    Ok((records, Outcome::Ok))
}

pub fn csv_row(r: &StepRecord) -> [String; 10] {
    let p = &r.peak;
    [
        r.step.to_string(),
        r.loss.to_string(),
        r.loss_evaluations.to_string(),
        r.elapsed_ms.to_string(),
        p.get(Category::Weights).to_string(),
        p.get(Category::Grads).to_string(),
        p.get(Category::OptState).to_string(),
        p.get(Category::Activation).to_string(),
        p.get(Category::Transient).to_string(),
        p.total.to_string(),
    ]
}

pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in steps {
        w.write_record(csv_row(r))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))?;
    Ok(())
}

/// Reads a step CSV back. The `other` category is not part of the schema
/// and reads as zero.
pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(BenchError::Check(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| BenchError::Check(format!("{}: short row", path.display())))
        };
        let num = |i: usize| -> Result<u64> {
            f(i)?
                .parse()
                .map_err(|_| BenchError::Check(format!("{}: bad integer `{}`", path.display(), f(i).unwrap_or(""))))
        };
        let float = |i: usize| -> Result<f64> {
            f(i)?
                .parse()
                .map_err(|_| BenchError::Check(format!("{}: bad number `{}`", path.display(), f(i).unwrap_or(""))))
        };
        let mut peak = PeakBytes::default();
        for (i, c) in
            [Category::Weights, Category::Grads, Category::OptState, Category::Activation, Category::Transient]
                .into_iter()
                .enumerate()
        {
            peak.by_category.set(c, num(4 + i)?);
        }
        peak.total = num(9)?;
        out.push(StepRecord {
            step: num(0)? as usize,
            loss: float(1)?,
            loss_evaluations: num(2)? as usize,
            elapsed_ms: float(3)?,
            peak,
        });
    }
    Ok(out)
}

pub fn write_loss_dat(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut text = String::from("# step loss\n");
    for r in steps {
        text.push_str(&format!("{} {}\n", r.step, r.loss));
    }
    fs::write(path, text).map_err(|e| BenchError::io(path, e))
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    write_steps_csv(&dir.join(STEPS_CSV), &report.steps)?;
    write_loss_dat(&dir.join(LOSS_DAT), &report.steps)?;
    let path = dir.join(SUMMARY_JSON);
    let mut f = fs::File::create(&path).map_err(|e| BenchError::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n").map_err(|e| BenchError::io(&path, e))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use zolab_core::footprint::OptimizerFamily;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.vocab_size = 60;
        c.model.dim = 16;
        c.model.heads = 2;
        c.model.seq_len = 8;
        c.data.size = 32;
        c.batch_size = 4;
        c.steps = 3;
        c
    }

    #[test]
    fn mezo_records_two_evaluations_per_step() {
        let r = run_experiment(&small()).unwrap();
        assert_eq!(r.outcome, Outcome::Ok);
        assert_eq!(r.steps.len(), 3);
        assert!(r.steps.iter().all(|s| s.loss_evaluations == 2));
        assert_eq!(r.steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(r.totals.loss_evaluations, 6);
    }

    #[test]
    fn adam_below_four_params_is_oom_at_step_one() {
        let mut c = small().with_family(OptimizerFamily::Adam);
        c.budget_bytes = Some(4 * 4 * c.model.param_count() as u64 - 1);
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.outcome, Outcome::Oom { step: 1 });
        assert!(r.steps.is_empty());
        assert_eq!(r.outcome.exit_code(), 3);
    }

    #[test]
    fn budget_below_weights_is_oom_at_setup() {
        let mut c = small();
        c.budget_bytes = Some(100);
        assert_eq!(run_experiment(&c).unwrap().outcome, Outcome::Oom { step: 1 });
    }

    #[test]
    fn totals_skip_warmup_step() {
        let mk = |ms: f64| StepRecord {
            step: 1,
            loss: 1.0,
            loss_evaluations: 2,
            elapsed_ms: ms,
            peak: PeakBytes::default(),
        };
        let t = Totals::from_steps(&[mk(10.0), mk(2.0), mk(4.0)]);
        assert_eq!(t.mean_step_ms, Some(3.0));
        assert_eq!(t.min_step_ms, Some(2.0));
        assert_eq!(t.wall_ms, 16.0);
        assert_eq!(Totals::from_steps(&[mk(5.0)]).mean_step_ms, Some(5.0));
        assert_eq!(Totals::from_steps(&[]).mean_step_ms, None);
    }
}
