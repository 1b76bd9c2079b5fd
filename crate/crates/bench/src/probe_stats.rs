//! Quality of the two-point estimator on random quadratics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use zolab_core::zo::{spsa_estimate_with, Direction, DirectionSource, SeededNormal};
use zolab_core::{ProbeSeed, Quadratic};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeStatsConfig {
    pub dim: usize,
    pub probes: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Trials per rung of the variance ladder; 0 skips the ladder.
    pub trials: usize,
}

impl Default for ProbeStatsConfig {
    fn default() -> Self {
        Self { dim: 50, probes: 1000, epsilon: 1e-3, seed: 0, trials: 1000 }
    }
}

/// Spread of the probe-mean estimate at one probe count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub probes: usize,
    pub trials: usize,
    pub cosine_mean: f64,
    pub cosine_var: f64,
    /// Mean of ‖ĝ − ∇L‖² over trials.
    pub mse: f64,
    /// `mse(1 probe) / mse(this rung)`; ideally equal to `probes`.
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStatsReport {
    pub config: ProbeStatsConfig,
    /// Cosine between the `probes`-probe mean direction and the true gradient.
    pub cosine: f64,
    pub ladder: Vec<LadderRow>,
}

/// A seeded quadratic with curvatures in [0.5, 2) and a point away from its
/// minimum.
pub fn random_quadratic(dim: usize, seed: u64) -> (Quadratic, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curvature: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect();
    let center: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let theta: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    (Quadratic::new(curvature, center).expect("valid quadratic"), theta)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `(1/n) Σ gₖ zₖ` over probes seeded from `(seed_base, trial, k)`.
pub fn probe_mean<S: DirectionSource>(
    q: &Quadratic,
    theta: &mut [f64],
    probes: usize,
    epsilon: f64,
    seed_base: u64,
    trial: u64,
    source: &S,
) -> Result<Vec<f64>> {
    let dim = theta.len();
    let mut mean = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    for k in 0..probes {
        let seed = ProbeSeed::for_probe(seed_base, trial, k as u64);
        let dir = source.direction(seed);
        let r = spsa_estimate_with(q, theta, epsilon, &dir, seed, &mut scratch)?;
        dir.fill(0, &mut z);
        for (m, &zi) in mean.iter_mut().zip(&z) {
            *m += r.projected_grad * zi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= probes as f64);
    Ok(mean)
}

fn ladder_rung(
    q: &Quadratic,
    theta: &[f64],
    truth: &[f64],
    probes: usize,
    trials: usize,
    cfg: &ProbeStatsConfig,
) -> Result<(f64, f64, f64)> {
    let mut cos = Vec::with_capacity(trials);
    let mut mse = 0.0;
    let mut point = theta.to_vec();
    for t in 0..trials {
        // distinct seed streams per rung
        let trial = ((probes as u64) << 32) | t as u64;
        let g = probe_mean(q, &mut point, probes, cfg.epsilon, cfg.seed, trial, &SeededNormal)?;
        point.copy_from_slice(theta);
        cos.push(cosine(&g, truth));
        mse += g.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let n = trials as f64;
    let mean = cos.iter().sum::<f64>() / n;
    let var = cos.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var, mse / n))
}

pub fn probe_stats(cfg: &ProbeStatsConfig) -> Result<ProbeStatsReport> {
    if cfg.dim < 2 {
        return Err(BenchError::Config(format!("dim must be at least 2, got {}", cfg.dim)));
    }
    if cfg.probes == 0 {
        return Err(BenchError::Config("probes must be at least 1".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(BenchError::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let (q, theta) = random_quadratic(cfg.dim, cfg.seed);
    let truth = q.gradient(&theta);
    let mut point = theta.clone();
    let g = probe_mean(&q, &mut point, cfg.probes, cfg.epsilon, cfg.seed, u64::MAX, &SeededNormal)?;
    let cos = cosine(&g, &truth);

    let mut ladder = Vec::new();
    if cfg.trials > 0 {
        let mut base_mse = None;
        for &n in &[1usize, 10, 100, 1000] {
            // keep the largest rung affordable
            let trials = if n >= 1000 { cfg.trials.div_ceil(5).max(2) } else { cfg.trials.max(2) };
            let (cosine_mean, cosine_var, mse) = ladder_rung(&q, &theta, &truth, n, trials, cfg)?;
            let base = *base_mse.get_or_insert(mse);
            ladder.push(LadderRow { probes: n, trials, cosine_mean, cosine_var, mse, decay: base / mse });
        }
    }
    Ok(ProbeStatsReport { config: *cfg, cosine: cos, ladder })
}
