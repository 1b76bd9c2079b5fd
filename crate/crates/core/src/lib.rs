//! Memory-lean derivative-free fine-tuning next to derivative-based
//! baselines, on a small transformer classifier.
//!
//! * [`zo`]: two-point zeroth-order estimates with seed-replayed directions.
//! * [`deriv`]: SGD and Adam over reverse-mode gradients.
//! * [`ledger`]: per-category accounting of every numeric buffer.
//! * [`footprint`]: analytic footprint model and OOM verdicts.

pub mod deriv;
pub mod error;
pub mod finite_diff;
pub mod footprint;
pub mod ledger;
pub mod model;
pub mod objective;
pub mod record;
pub mod rng;
pub mod scalar;
pub mod zo;

pub use deriv::{adam_step, derivative_train_step, sgd_step, AdamConfig, AdamState, DerivConfig, DerivOptimizer};
pub use error::{Error, Result};
pub use finite_diff::{finite_diff_at, finite_diff_gradient};
pub use footprint::{
    estimate_footprint, predict_oom, FootprintQuery, MemoryEstimate, ModelPreset, OptimizerFamily, Verdict,
};
pub use ledger::{AllocationLedger, Category, CategoryBytes, LedgerError, PeakBytes, TrackedVec};
pub use model::{init_model, Batch, ModelConfig, ParameterVector, Transformer};
pub use objective::{CountingObjective, Differentiable, ModelObjective, Objective, Quadratic};
pub use record::StepRecord;
pub use rng::{normal_stream_fill, NormalStream};
pub use scalar::{Dtype, Scalar};
pub use zo::{
    perturb_in_place, spsa_estimate, zo_step, zo_step_parallel, ProbeResult, ProbeSeed, ZoConfig, ZoOptimizer,
};
