//! Transformer classifier: configuration, flat parameters, forward loss and
//! reverse-mode gradients.

mod batch;
mod config;
mod kernels;
mod params;
mod transformer;

pub use batch::Batch;
pub use config::{param_count_for, Layout, ModelConfig, TensorSpec};
pub use params::{init_model, ParameterVector};
pub use transformer::{LossAndGrad, Transformer};
