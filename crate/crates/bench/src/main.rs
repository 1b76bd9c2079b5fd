use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zolab_bench::grad_check::{grad_check, GradCheckConfig};
use zolab_bench::grid::{memory_table, time_table};
use zolab_bench::probe_stats::{probe_stats, ProbeStatsConfig};
use zolab_bench::{compare_grid, run_experiment, BenchError, ConfigMap, Outcome, Result, RunConfig};
use zolab_core::footprint::{
    estimate_footprint, gb_to_bytes, FootprintQuery, MemoryEstimate, ModelPreset, OptimizerFamily, Verdict,
};
use zolab_core::{Category, Dtype};

#[derive(Parser)]
#[command(name = "zolab", version, about = "Zeroth-order vs derivative-based fine-tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train for a number of steps and write steps.csv, summary.json and loss.dat.
    Run(RunArgs),
    /// Run an optimizer x batch-size grid.
    Compare(CompareArgs),
    /// Predict the memory footprint of a preset and check it against a budget.
    EstimateMem(EstimateArgs),
    /// Compare the backward pass with central finite differences.
    GradCheck(GradCheckArgs),
    /// Measure how well probe averages track the true gradient.
    ProbeStats(ProbeStatsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable), e.g. --set opt.lr=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long, conflicts_with = "budget_bytes")]
    budget_gb: Option<f64>,
}

impl ConfigArgs {
    fn map(&self) -> Result<ConfigMap> {
        let mut map = match &self.config {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::new(),
        };
        for o in &self.overrides {
            map.set_pair(o)?;
        }
        if let Some(d) = &self.out_dir {
            map.set("report.out_dir", d.display().to_string())?;
        }
        if let Some(s) = self.steps {
            map.set("train.steps", s.to_string())?;
        }
        if let Some(b) = self.budget_bytes {
            map.set("budget.bytes", b.to_string())?;
        }
        if let Some(g) = self.budget_gb {
            map.set("budget.gb", g.to_string())?;
        }
        Ok(map)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    optimizer: Option<OptimizerFamily>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "mezo,adam")]
    optimizers: Vec<OptimizerFamily>,
    #[arg(long, value_delimiter = ',', default_value = "8,64")]
    batch_sizes: Vec<usize>,
    /// Run independent cells concurrently (timings then interfere).
    #[arg(long)]
    parallel_cells: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    optimizer: OptimizerFamily,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "f32")]
    dtype: Dtype,
    #[arg(long, default_value_t = 1)]
    probes: usize,
    /// Parallel probe workers; 0 or 1 means serial.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    budget_gb: Option<f64>,
    #[arg(long, conflicts_with = "budget_gb")]
    budget_bytes: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ProbeStatsArgs {
    #[arg(long, default_value_t = 50)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trials per rung of the variance ladder; 0 skips it.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    json: bool,
}

fn gb(bytes: u64) -> String {
    format!("{:.3} GB", bytes as f64 / 1e9)
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let mut map = args.common.map()?;
    if let Some(o) = args.optimizer {
        map.set("opt.kind", o.as_str())?;
    }
    if let Some(b) = args.batch_size {
        map.set("train.batch_size", b.to_string())?;
    }
    let cfg = map.build()?;
    let report = run_experiment(&cfg)?;
    println!("step  loss          evals  elapsed_ms  peak_total");
    for s in &report.steps {
        println!("{:<5} {:<13.6} {:<6} {:<11.3} {}", s.step, s.loss, s.loss_evaluations, s.elapsed_ms, s.peak.total);
    }
    let t = &report.totals;
    match &report.outcome {
        Outcome::Ok => println!(
            "ok: {} steps, final loss {:.6}, mean step {:.3} ms, peak {} bytes",
            t.steps_completed,
            t.final_loss.unwrap_or(f64::NAN),
            t.mean_step_ms.unwrap_or(0.0),
            t.peak.total
        ),
        Outcome::Oom { step } => println!("oom at step {step}"),
        Outcome::Numeric { step, message } => println!("numeric failure at step {step}: {message}"),
    }
    if let Some(d) = &cfg.out_dir {
        println!("wrote {}", d.display());
    }
    Ok(report.outcome.exit_code())
}

fn print_table(rows: &[Vec<String>]) {
    for r in rows {
        println!("{}", r.iter().map(|c| format!("{c:>14}")).collect::<String>());
    }
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let cfg: RunConfig = args.common.map()?.build()?;
    let grid = compare_grid(&cfg, &args.optimizers, &args.batch_sizes, args.parallel_cells)?;
    println!("peak bytes");
    print_table(&memory_table(&grid));
    println!("mean step ms");
    print_table(&time_table(&grid));
    if let Some(d) = &cfg.out_dir {
        println!("wrote {}", d.display());
    }
    Ok(0)
}

fn print_estimate(e: &MemoryEstimate) {
    println!("preset      {} ({} parameters)", e.preset, e.param_count);
    println!("optimizer   {}  batch {}  dtype {}", e.optimizer, e.batch_size, e.dtype);
    for (name, v) in [
        (Category::Weights, e.weights),
        (Category::Grads, e.grads),
        (Category::OptState, e.optstate),
        (Category::Activation, e.activation),
        (Category::Transient, e.transient),
    ] {
        println!("{:<11} {:>16} bytes  {}", name.as_str(), v, gb(v));
    }
    println!("{:<11} {:>16} bytes  {}", "total", e.total, gb(e.total));
    if let (Some(b), Some(h)) = (e.budget, e.headroom) {
        let verdict = match e.verdict {
            Verdict::Fits => "fits",
            Verdict::Oom => "oom",
        };
        println!("budget      {:>16} bytes  {}", b, gb(b));
        println!("headroom    {:>16} bytes", h);
        println!("verdict     {verdict}");
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<i32> {
    let preset = ModelPreset::named(&args.preset)?;
    let query = FootprintQuery {
        optimizer: args.optimizer,
        batch_size: args.batch_size,
        dtype: args.dtype,
        probes: args.probes,
        parallel_workers: args.workers,
    };
    let budget = match (args.budget_gb, args.budget_bytes) {
        (Some(g), _) if !(g > 0.0) => return Err(BenchError::Config(format!("budget must be positive, got {g}"))),
        (Some(g), _) => Some(gb_to_bytes(g)),
        (None, Some(0)) => return Err(BenchError::Config("budget must be positive".into())),
        (None, b) => b,
    };
    let est = estimate_footprint(&preset, &query, budget)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&est)?);
    } else {
        print_estimate(&est);
    }
    Ok(if est.budget.is_some() && est.verdict == Verdict::Oom { 3 } else { 0 })
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        coords: args.coords,
        h: args.h,
        tolerance: args.tol,
        batch_size: args.batch_size,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let r = grad_check(&cfg)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("coordinates checked  {}", r.coords_checked);
        println!("max relative error   {:.3e} (tolerance {:.1e})", r.max_rel_error, r.config.tolerance);
        if let Some(w) = &r.worst {
            println!(
                "worst                {} [{}]: analytic {:e}, numeric {:e}",
                w.tensor, w.index, w.analytic, w.numeric
            );
        }
        println!("{}", if r.passed { "pass" } else { "FAIL" });
    }
    Ok(if r.passed { 0 } else { 4 })
}

fn cmd_probe_stats(args: ProbeStatsArgs) -> Result<i32> {
    let cfg = ProbeStatsConfig {
        dim: args.dim,
        probes: args.probes,
        epsilon: args.epsilon,
        seed: args.seed,
        trials: args.trials,
    };
    let r = probe_stats(&cfg)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("dim {}  probes {}  epsilon {:e}", cfg.dim, cfg.probes, cfg.epsilon);
        println!("cosine {:.6}", r.cosine);
        if !r.ladder.is_empty() {
            println!("probes  trials  cosine_mean  cosine_var    mse          decay");
            for row in &r.ladder {
                println!(
                    "{:<7} {:<7} {:<12.6} {:<13.4e} {:<12.4e} {:.2}",
                    row.probes, row.trials, row.cosine_mean, row.cosine_var, row.mse, row.decay
                );
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::EstimateMem(a) => cmd_estimate(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::ProbeStats(a) => cmd_probe_stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
