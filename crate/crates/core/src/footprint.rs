//! Analytic memory footprint and out-of-memory verdicts.
//!
//! With `e` bytes per element, `P` parameters, batch `B`, `L` layers,
//! width `d`, `h` heads and sequence length `s`:
//!
//! | optimizer | weights | grads | optstate | activation | transient |
//! |-----------|---------|-------|----------|------------|-----------|
//! | adam      | eP      | eP    | 2eP      | eBL·(sdα + s²hβ) | 0 |
//! | sgd       | eP      | eP    | 0        | eBL·(sdα + s²hβ) | 0 |
//! | mezo      | eP      | 0     | 0        | eB·2·(sdα + s²hβ) | W·eP in parallel mode |
//!
//! `α = 10` counts per-token hidden-state buffers per layer and `β = 2` the
//! attention score and probability buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_count_for, ModelConfig};
use crate::scalar::Dtype;

pub const ALPHA: u64 = 10;
pub const BETA: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerFamily {
    Mezo,
    Adam,
    Sgd,
}

impl OptimizerFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerFamily::Mezo => "mezo",
            OptimizerFamily::Adam => "adam",
            OptimizerFamily::Sgd => "sgd",
        }
    }
}

impl std::str::FromStr for OptimizerFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mezo" | "zo" => Ok(OptimizerFamily::Mezo),
            "adam" => Ok(OptimizerFamily::Adam),
            "sgd" => Ok(OptimizerFamily::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected mezo, adam or sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture dimensions of a named model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub param_count: u64,
}

impl ModelPreset {
    fn build(
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        seq_len: usize,
        vocab: usize,
        classes: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            layers,
            dim,
            heads,
            seq_len,
            vocab,
            classes,
            param_count: param_count_for(vocab, dim, layers, seq_len, classes) as u64,
        }
    }

    pub fn from_config(name: &str, cfg: &ModelConfig) -> Self {
        Self::build(name, cfg.layers, cfg.dim, cfg.heads, cfg.seq_len, cfg.vocab_size, cfg.classes)
    }

    /// `roberta-large`, `opt-1.3b` or `toy`.
    pub fn named(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "roberta-large" => Ok(Self::build("roberta-large", 24, 1024, 16, 128, 50265, 2)),
            "opt-1.3b" => Ok(Self::build("opt-1.3b", 24, 2048, 32, 128, 50272, 2)),
            "toy" => Ok(Self::from_config("toy", &ModelConfig::toy())),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected roberta-large, opt-1.3b or toy)"))),
        }
    }

    pub fn names() -> &'static [&'static str] {
        &["roberta-large", "opt-1.3b", "toy"]
    }

    /// Activation elements of one layer for one sample.
    pub fn layer_activation_elems(&self) -> u64 {
        let (s, d, h) = (self.seq_len as u64, self.dim as u64, self.heads as u64);
        s * d * ALPHA + s * s * h * BETA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Fits,
    Oom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintQuery {
    pub optimizer: OptimizerFamily,
    pub batch_size: usize,
    pub dtype: Dtype,
    pub probes: usize,
    /// Concurrent workers in parallel mode; 0 or 1 means serial.
    pub parallel_workers: usize,
}

impl FootprintQuery {
    pub fn new(optimizer: OptimizerFamily, batch_size: usize, dtype: Dtype) -> Self {
        Self { optimizer, batch_size, dtype, probes: 1, parallel_workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub preset: String,
    pub optimizer: OptimizerFamily,
    pub batch_size: usize,
    pub dtype: Dtype,
    pub param_count: u64,
    pub weights: u64,
    pub grads: u64,
    pub optstate: u64,
    pub activation: u64,
    pub transient: u64,
    pub total: u64,
    pub budget: Option<u64>,
    pub verdict: Verdict,
    pub headroom: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomPrediction {
    pub verdict: Verdict,
    pub headroom: i64,
}

/// Per-category byte prediction for one training configuration. The probe
/// count does not change the footprint: serial probes reuse the same buffers.
pub fn estimate_footprint(preset: &ModelPreset, query: &FootprintQuery, budget: Option<u64>) -> Result<MemoryEstimate> {
    if query.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if query.probes == 0 {
        return Err(Error::Config("probes must be at least 1".into()));
    }
    let e = query.dtype.bytes();
    let p = preset.param_count;
    let b = query.batch_size as u64;
    let per_layer = e * b * preset.layer_activation_elems();
    let weights = e * p;
    let (grads, optstate, activation, transient) = match query.optimizer {
        OptimizerFamily::Adam => (e * p, 2 * e * p, preset.layers as u64 * per_layer, 0),
        OptimizerFamily::Sgd => (e * p, 0, preset.layers as u64 * per_layer, 0),
        OptimizerFamily::Mezo => {
            let transient = if query.parallel_workers > 1 { query.parallel_workers as u64 * e * p } else { 0 };
            (0, 0, 2 * per_layer, transient)
        }
    };
    let total = weights + grads + optstate + activation + transient;
    let mut est = MemoryEstimate {
        preset: preset.name.clone(),
        optimizer: query.optimizer,
        batch_size: query.batch_size,
        dtype: query.dtype,
        param_count: p,
        weights,
        grads,
        optstate,
        activation,
        transient,
        total,
        budget: None,
        verdict: Verdict::Fits,
        headroom: None,
    };
    if let Some(budget) = budget {
        let pred = predict_oom(&est, budget)?;
        est.budget = Some(budget);
        est.verdict = pred.verdict;
        est.headroom = Some(pred.headroom);
    }
    Ok(est)
}

/// `oom` iff the predicted total exceeds the budget.
pub fn predict_oom(estimate: &MemoryEstimate, budget: u64) -> Result<OomPrediction> {
    if budget == 0 {
        return Err(Error::Precondition("budget must be positive".into()));
    }
    let verdict = if estimate.total > budget { Verdict::Oom } else { Verdict::Fits };
    Ok(OomPrediction { verdict, headroom: budget as i64 - estimate.total as i64 })
}

pub const GB: f64 = 1e9;

pub fn gb_to_bytes(gb: f64) -> u64 {
    (gb * GB).round() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(opt: OptimizerFamily, b: usize) -> FootprintQuery {
        FootprintQuery::new(opt, b, Dtype::F32)
    }

    #[test]
    fn static_bytes_for_a_million_params() {
        let preset = ModelPreset {
            name: "flat".into(),
            layers: 0,
            dim: 1,
            heads: 1,
            seq_len: 1,
            vocab: 1,
            classes: 2,
            param_count: 1_000_000,
        };
        let est = estimate_footprint(&preset, &q(OptimizerFamily::Adam, 1), None).unwrap();
        assert_eq!(est.weights, 4_000_000);
        assert_eq!(est.grads, 4_000_000);
        assert_eq!(est.optstate, 8_000_000);
        assert_eq!(est.activation, 0);
        assert_eq!(est.total, 16_000_000);
    }

    #[test]
    fn preset_param_counts() {
        let r = ModelPreset::named("roberta-large").unwrap();
        assert!((r.param_count as f64 - 355e6).abs() / 355e6 < 0.01, "{}", r.param_count);
        let o = ModelPreset::named("opt-1.3b").unwrap();
        assert!((o.param_count as f64 - 1.3e9).abs() / 1.3e9 < 0.02, "{}", o.param_count);
        assert_eq!(ModelPreset::named("toy").unwrap().param_count, 166_146);
        assert!(matches!(ModelPreset::named("gpt-9"), Err(Error::Config(_))));
    }

    #[test]
    fn roberta_adam_batch8_lands_near_measured_band() {
        let r = ModelPreset::named("roberta-large").unwrap();
        let est = estimate_footprint(&r, &q(OptimizerFamily::Adam, 8), Some(gb_to_bytes(12.0))).unwrap();
        let static_gb = (est.weights + est.grads + est.optstate) as f64 / GB;
        assert!((static_gb - 5.66).abs() < 0.05, "static {static_gb}");
        assert!((est.activation as f64 / GB - 1.41).abs() < 0.01);
        let total = est.total as f64 / GB;
        assert!((6.5 * 0.75..=6.7 * 1.25).contains(&total), "total {total}");
        assert_eq!(est.verdict, Verdict::Fits);
    }

    #[test]
    fn roberta_adam_batch64_is_oom_at_12gb() {
        let r = ModelPreset::named("roberta-large").unwrap();
        let est = estimate_footprint(&r, &q(OptimizerFamily::Adam, 64), Some(gb_to_bytes(12.0))).unwrap();
        assert!((est.activation as f64 / GB - 11.27).abs() < 0.05);
        assert_eq!(est.verdict, Verdict::Oom);
        assert!(est.headroom.unwrap() < 0);
    }

    #[test]
    fn roberta_mezo_batch64_fits() {
        let r = ModelPreset::named("roberta-large").unwrap();
        let est = estimate_footprint(&r, &q(OptimizerFamily::Mezo, 64), Some(gb_to_bytes(12.0))).unwrap();
        assert_eq!(est.verdict, Verdict::Fits);
        assert_eq!(est.grads + est.optstate + est.transient, 0);
        assert!(est.total < gb_to_bytes(4.0));
    }

    #[test]
    fn opt13b_mezo_between_weights_and_reported_total() {
        let o = ModelPreset::named("opt-1.3b").unwrap();
        let est = estimate_footprint(&o, &q(OptimizerFamily::Mezo, 8), Some(gb_to_bytes(12.0))).unwrap();
        assert!(est.weights as f64 / GB >= 5.2);
        assert!(est.total >= est.weights);
        assert!(est.total as f64 / GB <= 6.5);
        assert_eq!(est.verdict, Verdict::Fits);
    }

    #[test]
    fn tiny_budget_is_oom() {
        for name in ModelPreset::names() {
            let p = ModelPreset::named(name).unwrap();
            let est = estimate_footprint(&p, &q(OptimizerFamily::Mezo, 1), Some(gb_to_bytes(0.0001))).unwrap();
            assert_eq!(est.verdict, Verdict::Oom, "{name}");
        }
    }

    #[test]
    fn total_is_sum_and_verdict_matches_budget() {
        let p = ModelPreset::named("toy").unwrap();
        for opt in [OptimizerFamily::Mezo, OptimizerFamily::Adam, OptimizerFamily::Sgd] {
            for b in [1, 8, 64] {
                let mut query = q(opt, b);
                query.parallel_workers = 4;
                let est = estimate_footprint(&p, &query, Some(5_000_000)).unwrap();
                assert_eq!(est.total, est.weights + est.grads + est.optstate + est.activation + est.transient);
                assert_eq!(est.verdict == Verdict::Oom, est.total > 5_000_000);
            }
        }
    }

    #[test]
    fn sgd_has_no_optimizer_state() {
        let p = ModelPreset::named("toy").unwrap();
        let est = estimate_footprint(&p, &q(OptimizerFamily::Sgd, 1), None).unwrap();
        assert_eq!(est.optstate, 0);
        assert_eq!(est.grads, est.weights);
    }

    #[test]
    fn zero_budget_is_rejected() {
        let p = ModelPreset::named("toy").unwrap();
        let est = estimate_footprint(&p, &q(OptimizerFamily::Sgd, 1), None).unwrap();
        assert!(predict_oom(&est, 0).is_err());
    }
}
