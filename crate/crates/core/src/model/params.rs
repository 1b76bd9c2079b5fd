use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::ledger::{AllocationLedger, Category, TrackedVec};
use crate::model::{Layout, ModelConfig};
use crate::rng::NormalStream;
use crate::scalar::Scalar;

const INIT_SCALE: f64 = 0.02;

/// Flat model parameters, accounted as `weights`, with their tensor layout.
#[derive(Debug)]
pub struct ParameterVector<T> {
    values: TrackedVec<T>,
    layout: Layout,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn from_values(values: TrackedVec<T>, layout: Layout) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::Precondition(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.param_count()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn bytes(&self) -> u64 {
        self.values.bytes()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.tensor(name).map(|t| &self.values[t.range()])
    }

    pub fn try_clone(&self) -> Result<Self> {
        Ok(Self { values: self.values.try_clone()?, layout: self.layout.clone() })
    }
}

impl<T> Deref for ParameterVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.values
    }
}

impl<T> DerefMut for ParameterVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// Normal(0, 0.02²) for embeddings and linear weights, gains 1, biases 0.
/// Deterministic in `(config, seed)`.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64, ledger: &AllocationLedger) -> Result<ParameterVector<T>> {
    config.validate()?;
    if config.dtype != T::DTYPE {
        return Err(Error::Config(format!("model dtype {} does not match element type {}", config.dtype, T::DTYPE)));
    }
    let layout = config.layout();
    let mut values = ledger.alloc_zeroed::<T>(Category::Weights, layout.param_count())?;
    let stream = NormalStream::new(seed);
    for t in layout.tensors() {
        let slot = &mut values[t.range()];
        let leaf = t.name.rsplit('.').next().unwrap_or_default();
        if leaf == "gain" {
            slot.fill(T::one());
        } else if t.shape.len() == 2 {
            stream.fill_at(t.offset as u64, slot);
            let scale = T::from_f64(INIT_SCALE);
            slot.iter_mut().for_each(|v| *v = *v * scale);
        }
        // 1-d biases stay zero
    }
    ParameterVector::from_values(values, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dtype;

    #[test]
    fn init_is_deterministic() {
        let ledger = AllocationLedger::new();
        let a = init_model::<f32>(&ModelConfig::toy(), 7, &ledger).unwrap();
        let b = init_model::<f32>(&ModelConfig::toy(), 7, &ledger).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_model::<f32>(&ModelConfig::toy(), 8, &ledger).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_follows_tensor_roles() {
        let ledger = AllocationLedger::new();
        let cfg = ModelConfig::toy().with_dtype(Dtype::F64);
        let p = init_model::<f64>(&cfg, 1, &ledger).unwrap();
        assert!(p.tensor("blocks.0.ln1.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(p.tensor("blocks.1.mlp.b1").unwrap().iter().all(|&b| b == 0.0));
        let w = p.tensor("blocks.0.mlp.w1").unwrap();
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.001, "std {std}");
        assert_eq!(ledger.current(Category::Weights), p.param_count() as u64 * 8);
    }

    #[test]
    fn init_rejects_dtype_mismatch_and_bad_config() {
        let ledger = AllocationLedger::new();
        assert!(init_model::<f64>(&ModelConfig::toy(), 0, &ledger).is_err());
        let bad = ModelConfig { dim: 65, ..ModelConfig::toy() };
        assert!(matches!(init_model::<f32>(&bad, 0, &ledger), Err(Error::Config(_))));
    }
}
