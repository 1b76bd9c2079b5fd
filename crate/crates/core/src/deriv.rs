//! Derivative-based baselines: SGD and Adam over the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{AllocationLedger, Category, TrackedVec};
use crate::objective::Differentiable;
use crate::record::{StepRecord, StepTimer};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments, accounted as `optstate`.
#[derive(Debug)]
pub struct AdamState<T> {
    m: TrackedVec<T>,
    v: TrackedVec<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize, ledger: &AllocationLedger) -> Result<Self> {
        Ok(Self {
            m: ledger.alloc_zeroed(Category::OptState, param_count)?,
            v: ledger.alloc_zeroed(Category::OptState, param_count)?,
            t: 0,
        })
    }

    pub fn m(&self) -> &[T] {
        &self.m
    }

    pub fn v(&self) -> &[T] {
        &self.v
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

fn check_lengths(params: usize, grad: usize) -> Result<()> {
    if params != grad {
        return Err(Error::Precondition(format!("gradient length {grad} does not match {params} parameters")));
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, params: &mut [T], grad: &[T], config: &AdamConfig) -> Result<()> {
    check_lengths(params.len(), grad.len())?;
    check_lengths(params.len(), state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64(1.0 - config.beta2.powi(t));
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.eps);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `θ ← θ − η·g`
pub fn sgd_step<T: Scalar>(params: &mut [T], grad: &[T], lr: f64) -> Result<()> {
    check_lengths(params.len(), grad.len())?;
    let lr = T::from_f64(lr);
    for (p, &g) in params.iter_mut().zip(grad) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DerivConfig {
    Sgd { lr: f64 },
    Adam(AdamConfig),
}

impl DerivConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DerivConfig::Sgd { lr } if !(*lr >= 0.0) || !lr.is_finite() => {
                Err(Error::Config(format!("learning rate must be non-negative, got {lr}")))
            }
            DerivConfig::Sgd { .. } => Ok(()),
            DerivConfig::Adam(c) => c.validate(),
        }
    }
}

/// SGD or Adam with lazily allocated optimizer state.
#[derive(Debug)]
pub struct DerivOptimizer<T> {
    config: DerivConfig,
    adam: Option<AdamState<T>>,
}

impl<T: Scalar> DerivOptimizer<T> {
    pub fn new(config: DerivConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, adam: None })
    }

    pub fn config(&self) -> &DerivConfig {
        &self.config
    }

    pub fn adam_state(&self) -> Option<&AdamState<T>> {
        self.adam.as_ref()
    }
}

/// One forward+backward and one optimizer update.
///
/// The gradient is a flat `grads` buffer of `P` elements; Adam moments are
/// allocated under `optstate` on the first step, after the backward pass has
/// released its activations.
pub fn derivative_train_step<T: Scalar, O: Differentiable<T>>(
    optimizer: &mut DerivOptimizer<T>,
    objective: &O,
    params: &mut [T],
    step_index: usize,
    ledger: &AllocationLedger,
) -> Result<StepRecord> {
    let timer = StepTimer::start(ledger);
    let out = objective.loss_and_grad(params)?;
    match optimizer.config {
        DerivConfig::Sgd { lr } => sgd_step(params, &out.grad, lr)?,
        DerivConfig::Adam(cfg) => {
            if optimizer.adam.is_none() {
                optimizer.adam = Some(AdamState::new(params.len(), ledger)?);
            }
            let state = optimizer.adam.as_mut().expect("state allocated above");
            adam_step(state, params, &out.grad, &cfg)?;
        }
    }
    let loss = out.loss.to_f64();
    drop(out);
    Ok(timer.finish(step_index, loss, 1))
}
