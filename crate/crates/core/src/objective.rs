//! Loss functionals over a flat parameter slice.

use crate::error::{Error, Result};
use crate::ledger::{AllocationLedger, Category, TrackedVec};
use crate::model::{Batch, LossAndGrad, Transformer};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Something that can be evaluated at a parameter point.
pub trait Objective<T: Scalar> {
    fn loss(&self, params: &[T]) -> Result<T>;
}

/// An objective with an analytic gradient.
pub trait Differentiable<T: Scalar>: Objective<T> {
    fn loss_and_grad(&self, params: &[T]) -> Result<LossAndGrad<T>>;
}

impl<T: Scalar, O: Objective<T> + ?Sized> Objective<T> for &O {
    fn loss(&self, params: &[T]) -> Result<T> {
        (**self).loss(params)
    }
}

/// Mean cross-entropy of a transformer on one batch. Activations go through
/// `ledger`.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub model: &'a Transformer,
    pub batch: &'a Batch,
    pub ledger: &'a AllocationLedger,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a Transformer, batch: &'a Batch, ledger: &'a AllocationLedger) -> Self {
        Self { model, batch, ledger }
    }
}

impl<T: Scalar> Objective<T> for ModelObjective<'_> {
    fn loss(&self, params: &[T]) -> Result<T> {
        self.model.forward_loss(params, self.batch, self.ledger)
    }
}

impl<T: Scalar> Differentiable<T> for ModelObjective<'_> {
    fn loss_and_grad(&self, params: &[T]) -> Result<LossAndGrad<T>> {
        self.model.backward(params, self.batch, self.ledger)
    }
}

/// `L(θ) = ½ Σ aᵢ (θᵢ − cᵢ)²` with positive curvatures `a`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    curvature: Vec<f64>,
    center: Vec<f64>,
    ledger: AllocationLedger,
}

impl Quadratic {
    /// `½‖θ‖²` in `dim` dimensions.
    pub fn isotropic(dim: usize) -> Self {
        Self::new(vec![1.0; dim], vec![0.0; dim]).expect("valid isotropic quadratic")
    }

    pub fn new(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.len() {
            return Err(Error::Precondition("curvature and center lengths differ".into()));
        }
        if curvature.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Precondition("curvatures must be positive".into()));
        }
        Ok(Self { curvature, center, ledger: AllocationLedger::new() })
    }

    /// Gradients are accounted in this ledger.
    pub fn with_ledger(mut self, ledger: AllocationLedger) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        params.iter().zip(&self.curvature).zip(&self.center).map(|((&t, &a), &c)| a * (t - c)).collect()
    }

    fn check<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::Precondition(format!(
                "{} parameters for a {}-dimensional quadratic",
                params.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Objective<T> for Quadratic {
    fn loss(&self, params: &[T]) -> Result<T> {
        self.check(params)?;
        let mut acc = T::zero();
        for ((&t, &a), &c) in params.iter().zip(&self.curvature).zip(&self.center) {
            let r = t - T::from_f64(c);
            acc = acc + T::from_f64(a) * r * r;
        }
        let loss = acc * T::from_f64(0.5);
        if !loss.is_finite() {
            return Err(Error::numeric("quadratic"));
        }
        Ok(loss)
    }
}

impl<T: Scalar> Differentiable<T> for Quadratic {
    fn loss_and_grad(&self, params: &[T]) -> Result<LossAndGrad<T>> {
        let loss = self.loss(params)?;
        let mut grad: TrackedVec<T> = self.ledger.alloc_zeroed(Category::Grads, params.len())?;
        for (((g, &t), &a), &c) in grad.iter_mut().zip(params).zip(&self.curvature).zip(&self.center) {
            *g = T::from_f64(a) * (t - T::from_f64(c));
        }
        Ok(LossAndGrad { loss, grad })
    }
}

/// Counts evaluations of the wrapped objective.
#[derive(Debug)]
pub struct CountingObjective<O> {
    inner: O,
    evaluations: AtomicUsize,
}

impl<O> CountingObjective<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, evaluations: AtomicUsize::new(0) }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<T: Scalar, O: Objective<T>> Objective<T> for CountingObjective<O> {
    fn loss(&self, params: &[T]) -> Result<T> {
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        self.inner.loss(params)
    }
}
