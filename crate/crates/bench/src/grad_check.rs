//! Backward pass against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zolab_core::{finite_diff_at, init_model, AllocationLedger, Dtype, ModelConfig, ModelObjective, Transformer};

use crate::data::{generate_dataset, Task};
use crate::error::{BenchError, Result};

/// Gradients below this magnitude on both sides are compared absolutely:
/// biases whose exact gradient is zero come out as ~1e-18 analytically and
/// ~1e-13 by differencing.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub coords: usize,
    pub h: f64,
    pub tolerance: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy().with_dtype(Dtype::F64),
            coords: 200,
            h: 1e-4,
            tolerance: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub worst: Option<Worst>,
}

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Half the coordinates uniform over all parameters, half uniform over
/// tensors so that small tensors are exercised too.
fn sample_coords(model: &Transformer, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let tensors = model.layout().tensors();
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                rng.gen_range(0..model.param_count())
            } else {
                let t = &tensors[rng.gen_range(0..tensors.len())];
                t.offset + rng.gen_range(0..t.len())
            }
        })
        .collect()
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.model.dtype != Dtype::F64 {
        return Err(BenchError::Config("grad-check runs in f64".into()));
    }
    if cfg.coords == 0 || cfg.batch_size == 0 {
        return Err(BenchError::Config("coords and batch size must be positive".into()));
    }
    let ledger = AllocationLedger::new();
    let model = Transformer::new(cfg.model)?;
    let mut params = init_model::<f64>(&cfg.model, cfg.seed, &ledger)?;
    let data = generate_dataset(Task::MarkerDetect, cfg.batch_size, cfg.model.vocab_size, cfg.model.seq_len, cfg.seed)?;
    let batch = data.batch(0, cfg.batch_size)?;
    let grad = model.backward(&params, &batch, &ledger)?.grad;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let coords = sample_coords(&model, cfg.coords, &mut rng);
    let obj = ModelObjective::new(&model, &batch, &ledger);
    let numeric = finite_diff_at(&obj, &mut params[..], &coords, cfg.h)?;

    let mut max_rel = 0.0;
    let mut worst = None;
    for (&i, &n) in coords.iter().zip(&numeric) {
        let e = relative_error(grad[i], n);
        if e > max_rel || worst.is_none() {
            max_rel = e;
            let tensor = model
                .layout()
                .tensors()
                .iter()
                .find(|t| t.range().contains(&i))
                .map_or_else(String::new, |t| t.name.clone());
            worst = Some(Worst { index: i, tensor, analytic: grad[i], numeric: n });
        }
    }
    Ok(GradCheckReport {
        config: *cfg,
        coords_checked: coords.len(),
        max_rel_error: max_rel,
        passed: max_rel <= cfg.tolerance,
        worst,
    })
}
