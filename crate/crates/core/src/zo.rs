//! Zeroth-order fine-tuning with seed replay.
//!
//! A probe draws a Gaussian direction `z` from its seed, evaluates the loss at
//! `θ + εz` and `θ − εz`, and yields the projected gradient
//! `g = (ℓ⁺ − ℓ⁻) / 2ε`. The direction is never stored: every perturbation
//! and the final update regenerate it chunk by chunk, so the memory beyond
//! the parameters and one forward pass is a single chunk buffer.
//!
//! The update for `n` probes is `θ ← θ − (η/n) Σₖ gₖ zₖ`, applied probe by
//! probe in seed order.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{AllocationLedger, Category, TrackedVec};
use crate::objective::{CountingObjective, Objective};
use crate::record::{StepRecord, StepTimer};
use crate::rng::{probe_seed, NormalStream};
use crate::scalar::Scalar;

/// Elements of `z` materialized at a time.
pub const PERTURB_CHUNK: usize = 8192;

/// Names one perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeSeed(pub u64);

impl ProbeSeed {
    pub fn for_probe(seed_base: u64, step: u64, probe: u64) -> Self {
        ProbeSeed(probe_seed(seed_base, step, probe))
    }
}

/// A perturbation direction that can be produced in pieces.
pub trait Direction {
    /// Writes `z[start..start + out.len()]` into `out`.
    fn fill<T: Scalar>(&self, start: usize, out: &mut [T]);
}

impl Direction for NormalStream {
    fn fill<T: Scalar>(&self, start: usize, out: &mut [T]) {
        self.fill_at(start as u64, out);
    }
}

/// A fixed direction, zero beyond its length.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedDirection(pub Vec<f64>);

impl Direction for InjectedDirection {
    fn fill<T: Scalar>(&self, start: usize, out: &mut [T]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = T::from_f64(self.0.get(start + k).copied().unwrap_or(0.0));
        }
    }
}

/// Maps probe seeds to directions.
pub trait DirectionSource {
    type Dir: Direction;
    fn direction(&self, seed: ProbeSeed) -> Self::Dir;
}

/// Standard-normal directions from the counter-based stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeededNormal;

impl DirectionSource for SeededNormal {
    type Dir = NormalStream;

    fn direction(&self, seed: ProbeSeed) -> NormalStream {
        NormalStream::new(seed.0)
    }
}

/// The same direction for every seed.
impl DirectionSource for InjectedDirection {
    type Dir = InjectedDirection;

    fn direction(&self, _seed: ProbeSeed) -> InjectedDirection {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub lr: f64,
    pub probes: usize,
    pub parallel: bool,
    /// Worker threads in parallel mode; 0 means one per probe.
    pub workers: usize,
    pub seed_base: u64,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self { epsilon: 1e-3, lr: 1e-6, probes: 1, parallel: false, workers: 0, seed_base: 0 }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.probes == 0 {
            return Err(Error::Config("probes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            self.probes
        } else {
            self.workers.min(self.probes)
        }
    }
}

/// One two-point estimate. `projected_grad == (loss_plus − loss_minus) / 2ε`
/// as computed in `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult<T> {
    pub seed: ProbeSeed,
    pub projected_grad: T,
    pub loss_plus: T,
    pub loss_minus: T,
}

fn chunk_len(param_count: usize) -> usize {
    PERTURB_CHUNK.min(param_count.max(1))
}

fn alloc_chunk<T: Scalar>(ledger: &AllocationLedger, param_count: usize) -> Result<TrackedVec<T>> {
    Ok(ledger.alloc_zeroed(Category::Transient, chunk_len(param_count))?)
}

/// `θ ← θ + scale·z`, regenerating `z` into `scratch` one chunk at a time.
pub fn perturb_with<T: Scalar, D: Direction>(params: &mut [T], dir: &D, scale: T, scratch: &mut [T]) {
    if scale == T::zero() || params.is_empty() {
        return;
    }
    assert!(!scratch.is_empty(), "perturbation scratch must be non-empty");
    let width = scratch.len();
    for (c, chunk) in params.chunks_mut(width).enumerate() {
        let z = &mut scratch[..chunk.len()];
        dir.fill(c * width, z);
        for (p, &zi) in chunk.iter_mut().zip(z.iter()) {
            *p = *p + scale * zi;
        }
    }
}

/// `θᵢ ← θᵢ + scale·zᵢ` with `z` the normal stream of `seed`. Extra memory is
/// one chunk, independent of the parameter count.
pub fn perturb_in_place<T: Scalar>(
    params: &mut [T],
    seed: ProbeSeed,
    scale: T,
    ledger: &AllocationLedger,
) -> Result<()> {
    let mut scratch = alloc_chunk::<T>(ledger, params.len())?;
    perturb_with(params, &NormalStream::new(seed.0), scale, &mut scratch);
    Ok(())
}

fn finite_or<T: Scalar>(v: Result<T>) -> Result<T> {
    match v {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(_) => Err(Error::numeric("loss")),
        Err(e) => Err(e),
    }
}

/// `+ε → ℓ⁺ → −2ε → ℓ⁻ → +ε`. On failure the parameters are moved back to
/// the starting point before the error is returned.
pub fn spsa_estimate_with<T: Scalar, O: Objective<T> + ?Sized, D: Direction>(
    objective: &O,
    params: &mut [T],
    epsilon: T,
    dir: &D,
    seed: ProbeSeed,
    scratch: &mut [T],
) -> Result<ProbeResult<T>> {
    if !(epsilon > T::zero()) {
        return Err(Error::Precondition(format!("epsilon must be positive, got {epsilon}")));
    }
    let two_eps = epsilon + epsilon;
    perturb_with(params, dir, epsilon, scratch);
    let loss_plus = match finite_or(objective.loss(params)) {
        Ok(l) => l,
        Err(e) => {
            perturb_with(params, dir, -epsilon, scratch);
            return Err(e);
        }
    };
    perturb_with(params, dir, -two_eps, scratch);
    let loss_minus = finite_or(objective.loss(params));
    perturb_with(params, dir, epsilon, scratch);
    let loss_minus = loss_minus?;
    Ok(ProbeResult { seed, projected_grad: (loss_plus - loss_minus) / two_eps, loss_plus, loss_minus })
}

/// Two-point estimate along the normal direction of `seed`.
pub fn spsa_estimate<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    params: &mut [T],
    epsilon: f64,
    seed: ProbeSeed,
    ledger: &AllocationLedger,
) -> Result<ProbeResult<T>> {
    let mut scratch = alloc_chunk::<T>(ledger, params.len())?;
    spsa_estimate_with(objective, params, T::from_f64(epsilon), &NormalStream::new(seed.0), seed, &mut scratch)
}

/// Replays the three perturbations of a probe without evaluating anything.
fn replay_probe_cycle<T: Scalar, D: Direction>(params: &mut [T], dir: &D, epsilon: T, scratch: &mut [T]) {
    let two_eps = epsilon + epsilon;
    perturb_with(params, dir, epsilon, scratch);
    perturb_with(params, dir, -two_eps, scratch);
    perturb_with(params, dir, epsilon, scratch);
}

fn apply_update<T: Scalar, S: DirectionSource>(
    params: &mut [T],
    results: &[ProbeResult<T>],
    lr: f64,
    source: &S,
    scratch: &mut [T],
) {
    let n = T::from_usize(results.len());
    let lr = T::from_f64(lr);
    for r in results {
        let scale = -(lr * r.projected_grad / n);
        perturb_with(params, &source.direction(r.seed), scale, scratch);
    }
}

fn mean_center_loss<T: Scalar>(results: &[ProbeResult<T>]) -> f64 {
    let sum: f64 = results.iter().map(|r| 0.5 * (r.loss_plus.to_f64() + r.loss_minus.to_f64())).sum();
    sum / results.len() as f64
}

/// Serial zeroth-order step with normal directions.
pub fn zo_step<T: Scalar, O: Objective<T>>(
    objective: &O,
    params: &mut [T],
    config: &ZoConfig,
    step_index: usize,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    zo_step_with(objective, params, config, step_index, ledger, &SeededNormal)
}

/// Serial zeroth-order step with directions from `source`.
///
/// Performs exactly `2n` loss evaluations. The reported loss is the mean of
/// `(ℓ⁺ + ℓ⁻)/2` over probes.
pub fn zo_step_with<T: Scalar, O: Objective<T>, S: DirectionSource>(
    objective: &O,
    params: &mut [T],
    config: &ZoConfig,
    step_index: usize,
    ledger: &AllocationLedger,
    source: &S,
) -> Result<StepRecord> {
    config.validate()?;
    let timer = StepTimer::start(ledger);
    let counted = CountingObjective::new(objective);
    let eps = T::from_f64(config.epsilon);
    let mut scratch = alloc_chunk::<T>(ledger, params.len())?;
    let mut results = Vec::with_capacity(config.probes);
    for k in 0..config.probes {
        let seed = ProbeSeed::for_probe(config.seed_base, step_index as u64, k as u64);
        let dir = source.direction(seed);
        results.push(spsa_estimate_with(&counted, params, eps, &dir, seed, &mut scratch)?);
    }
    apply_update(params, &results, config.lr, source, &mut scratch);
    drop(scratch);
    Ok(timer.finish(step_index, mean_center_loss(&results), counted.evaluations()))
}

/// Parallel zeroth-order step: probes are evaluated concurrently on private
/// parameter replicas (accounted as `transient`, one per worker).
///
/// The result is bitwise identical to [`zo_step_with`] for the same seeds.
/// Serial restores leave rounding drift behind, so replica `k` starts from
/// the parameters as they stand after probes `0..k` have been replayed; the
/// replay is perturbation-only and cheap next to the loss evaluations.
pub fn zo_step_parallel<T, O, S>(
    objective: &O,
    params: &mut [T],
    config: &ZoConfig,
    step_index: usize,
    ledger: &AllocationLedger,
    pool: &ThreadPool,
    source: &S,
) -> Result<StepRecord>
where
    T: Scalar,
    O: Objective<T> + Sync,
    S: DirectionSource + Sync,
    S::Dir: Send,
{
    config.validate()?;
    if config.probes < 2 {
        return Err(Error::Precondition("parallel mode needs at least 2 probes".into()));
    }
    let timer = StepTimer::start(ledger);
    let counted = CountingObjective::new(objective);
    let eps = T::from_f64(config.epsilon);
    let workers = config.effective_workers().min(pool.current_num_threads().max(1));
    let n = config.probes;
    let seeds: Vec<ProbeSeed> =
        (0..n).map(|k| ProbeSeed::for_probe(config.seed_base, step_index as u64, k as u64)).collect();

    let mut prep = alloc_chunk::<T>(ledger, params.len())?;
    let mut results: Vec<ProbeResult<T>> = Vec::with_capacity(n);
    let mut carry: Option<TrackedVec<T>> = None;
    let mut wave_start = 0;
    while wave_start < n {
        let wave_end = (wave_start + workers).min(n);
        let mut replicas: Vec<TrackedVec<T>> = Vec::with_capacity(wave_end - wave_start);
        replicas.push(match carry.take() {
            Some(c) => c,
            None => ledger.alloc_copy(Category::Transient, params)?,
        });
        for &seed in &seeds[wave_start..wave_end - 1] {
            let mut next = replicas[replicas.len() - 1].try_clone()?;
            replay_probe_cycle(&mut next, &source.direction(seed), eps, &mut prep);
            replicas.push(next);
        }

        let counted = &counted;
        let seeds = &seeds;
        let outcomes: Vec<Result<ProbeResult<T>>> = pool.install(|| {
            replicas
                .par_iter_mut()
                .enumerate()
                .map(|(i, replica)| {
                    let k = wave_start + i;
                    let mut scratch = alloc_chunk::<T>(ledger, replica.len())?;
                    let dir = source.direction(seeds[k]);
                    spsa_estimate_with(counted, replica, eps, &dir, seeds[k], &mut scratch)
                })
                .collect()
        });
        for outcome in outcomes {
            results.push(outcome?);
        }
        carry = replicas.pop();
        drop(replicas);
        wave_start = wave_end;
    }

    if let Some(state) = carry {
        params.copy_from_slice(&state);
    }
    apply_update(params, &results, config.lr, source, &mut prep);
    drop(prep);
    Ok(timer.finish(step_index, mean_center_loss(&results), counted.evaluations()))
}

/// Zeroth-order optimizer owning its worker pool.
pub struct ZoOptimizer {
    config: ZoConfig,
    pool: Option<ThreadPool>,
}

impl std::fmt::Debug for ZoOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ZoOptimizer")
            .field("config", &self.config)
            .field("pool_threads", &self.pool.as_ref().map(|p| p.current_num_threads()))
            .finish()
    }
}

impl ZoOptimizer {
    pub fn new(config: ZoConfig) -> Result<Self> {
        config.validate()?;
        let pool = if config.parallel {
            if config.probes < 2 {
                return Err(Error::Config("parallel mode needs at least 2 probes".into()));
            }
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.effective_workers())
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { config, pool })
    }

    pub fn config(&self) -> &ZoConfig {
        &self.config
    }

    pub fn step<T: Scalar, O: Objective<T> + Sync>(
        &self,
        objective: &O,
        params: &mut [T],
        step_index: usize,
        ledger: &AllocationLedger,
    ) -> Result<StepRecord> {
        match &self.pool {
            Some(pool) => zo_step_parallel(objective, params, &self.config, step_index, ledger, pool, &SeededNormal),
            None => zo_step(objective, params, &self.config, step_index, ledger),
        }
    }
}
