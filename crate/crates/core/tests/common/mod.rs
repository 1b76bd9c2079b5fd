#![allow(dead_code)]

use zolab_core::rng::uniform_bits;
use zolab_core::{Batch, Dtype, ModelConfig};

/// Deterministic batch with alternating labels.
pub fn batch_for(cfg: &ModelConfig, batch_size: usize, seed: u64) -> Batch {
    let s = cfg.seq_len;
    let tokens = (0..batch_size * s).map(|i| (uniform_bits(seed, i as u64) % cfg.vocab_size as u64) as u32).collect();
    let labels = (0..batch_size).map(|b| (b % cfg.classes) as u32).collect();
    Batch::new(tokens, labels, s).unwrap()
}

/// A small f64 model for oracle comparisons.
pub fn small_f64() -> ModelConfig {
    ModelConfig { vocab_size: 40, dim: 16, layers: 2, heads: 2, seq_len: 6, classes: 3, dtype: Dtype::F64 }
}

/// Configs with roughly 1e4, 1e5 and 1e6 parameters.
pub fn scaled_configs() -> [ModelConfig; 3] {
    let base = ModelConfig::toy();
    [
        ModelConfig { vocab_size: 400, dim: 16, layers: 1, heads: 2, seq_len: 32, ..base },
        ModelConfig { vocab_size: 700, dim: 64, layers: 1, heads: 4, seq_len: 32, ..base },
        ModelConfig { vocab_size: 1500, dim: 128, layers: 4, heads: 4, seq_len: 32, ..base },
    ]
}
