//! Run configuration from flat `key = value` files with dotted keys.
//!
//! ```text
//! # comment
//! model.preset = toy
//! opt.kind = mezo
//! opt.lr = 1e-3
//! train.batch_size = 16
//! ```
//!
//! Unknown keys, duplicate keys and keys that do not apply to the selected
//! optimizer are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zolab_core::footprint::OptimizerFamily;
use zolab_core::{AdamConfig, Dtype, ModelConfig, ZoConfig};

use crate::data::Task;
use crate::error::{BenchError, Result};

pub const KEYS: &[&str] = &[
    "model.preset",
    "model.vocab_size",
    "model.dim",
    "model.layers",
    "model.heads",
    "model.seq_len",
    "model.classes",
    "model.dtype",
    "opt.kind",
    "opt.lr",
    "opt.epsilon",
    "opt.probes",
    "opt.parallel",
    "opt.workers",
    "opt.seed",
    "opt.beta1",
    "opt.beta2",
    "opt.delta",
    "train.batch_size",
    "train.steps",
    "train.seed",
    "data.task",
    "data.size",
    "data.seed",
    "data.csv",
    "budget.bytes",
    "budget.gb",
    "report.out_dir",
];

const ZO_ONLY: &[&str] = &["opt.epsilon", "opt.probes", "opt.parallel", "opt.workers", "opt.seed"];
const ADAM_ONLY: &[&str] = &["opt.beta1", "opt.beta2", "opt.delta"];

pub const DEFAULT_MEZO_LR: f64 = 1e-6;
pub const DEFAULT_SGD_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Mezo(ZoConfig),
    Adam(AdamConfig),
    Sgd { lr: f64 },
}

impl OptimizerSpec {
    pub fn family(&self) -> OptimizerFamily {
        match self {
            OptimizerSpec::Mezo(_) => OptimizerFamily::Mezo,
            OptimizerSpec::Adam(_) => OptimizerFamily::Adam,
            OptimizerSpec::Sgd { .. } => OptimizerFamily::Sgd,
        }
    }

    pub fn default_for(family: OptimizerFamily) -> Self {
        match family {
            OptimizerFamily::Mezo => OptimizerSpec::Mezo(ZoConfig { lr: DEFAULT_MEZO_LR, ..ZoConfig::default() }),
            OptimizerFamily::Adam => OptimizerSpec::Adam(AdamConfig::default()),
            OptimizerFamily::Sgd => OptimizerSpec::Sgd { lr: DEFAULT_SGD_LR },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub task: Task,
    pub size: usize,
    pub seed: u64,
    /// `text,label` file used instead of a synthetic task.
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub steps: usize,
    pub model_seed: u64,
    pub data: DataSpec,
    pub budget_bytes: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            optimizer: OptimizerSpec::default_for(OptimizerFamily::Mezo),
            batch_size: 8,
            steps: 10,
            model_seed: 0,
            data: DataSpec { task: Task::MarkerDetect, size: 512, seed: 0, csv: None },
            budget_bytes: None,
            out_dir: None,
        }
    }
}

/// Ordered `key → value` pairs, later layers overriding earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| BenchError::ConfigFile { path: origin.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(BenchError::Config(format!("unknown key `{key}`")));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) =
            pair.split_once('=').ok_or_else(|| BenchError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn build(&self) -> Result<RunConfig> {
        RunConfig::from_map(self)
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| BenchError::Config(format!("invalid value `{v}` for {key}")))
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let get = |k: &str| map.get(k);

        if let Some(p) = get("model.preset") {
            if p != "toy" {
                return Err(BenchError::Config(format!(
                    "preset `{p}` is available to estimate-mem only; runs use toy-scale models"
                )));
            }
        }
        let m = &mut cfg.model;
        for (key, slot) in [
            ("model.vocab_size", &mut m.vocab_size),
            ("model.dim", &mut m.dim),
            ("model.layers", &mut m.layers),
            ("model.heads", &mut m.heads),
            ("model.seq_len", &mut m.seq_len),
            ("model.classes", &mut m.classes),
        ] {
            if let Some(v) = get(key) {
                *slot = parse(key, v)?;
            }
        }
        if let Some(v) = get("model.dtype") {
            m.dtype = v.parse::<Dtype>().map_err(|_| BenchError::Config(format!("invalid dtype `{v}`")))?;
        }

        let family: OptimizerFamily = match get("opt.kind") {
            Some(k) => k.parse()?,
            None => OptimizerFamily::Mezo,
        };
        let stray: Vec<&str> = match family {
            OptimizerFamily::Mezo => ADAM_ONLY.to_vec(),
            OptimizerFamily::Adam => ZO_ONLY.to_vec(),
            OptimizerFamily::Sgd => ZO_ONLY.iter().chain(ADAM_ONLY).copied().collect(),
        };
        if let Some(k) = stray.into_iter().find(|k| get(k).is_some()) {
            return Err(BenchError::Config(format!("{k} does not apply to optimizer {family}")));
        }
        cfg.optimizer = OptimizerSpec::default_for(family);
        match &mut cfg.optimizer {
            OptimizerSpec::Mezo(z) => {
                if let Some(v) = get("opt.lr") {
                    z.lr = parse("opt.lr", v)?;
                }
                if let Some(v) = get("opt.epsilon") {
                    z.epsilon = parse("opt.epsilon", v)?;
                }
                if let Some(v) = get("opt.probes") {
                    z.probes = parse("opt.probes", v)?;
                }
                if let Some(v) = get("opt.parallel") {
                    z.parallel = parse("opt.parallel", v)?;
                }
                if let Some(v) = get("opt.workers") {
                    z.workers = parse("opt.workers", v)?;
                }
                if let Some(v) = get("opt.seed") {
                    z.seed_base = parse("opt.seed", v)?;
                }
            }
            OptimizerSpec::Adam(a) => {
                if let Some(v) = get("opt.lr") {
                    a.lr = parse("opt.lr", v)?;
                }
                if let Some(v) = get("opt.beta1") {
                    a.beta1 = parse("opt.beta1", v)?;
                }
                if let Some(v) = get("opt.beta2") {
                    a.beta2 = parse("opt.beta2", v)?;
                }
                if let Some(v) = get("opt.delta") {
                    a.eps = parse("opt.delta", v)?;
                }
            }
            OptimizerSpec::Sgd { lr } => {
                if let Some(v) = get("opt.lr") {
                    *lr = parse("opt.lr", v)?;
                }
            }
        }

        if let Some(v) = get("train.batch_size") {
            cfg.batch_size = parse("train.batch_size", v)?;
        }
        if let Some(v) = get("train.steps") {
            cfg.steps = parse("train.steps", v)?;
        }
        if let Some(v) = get("train.seed") {
            cfg.model_seed = parse("train.seed", v)?;
        }
        if let Some(v) = get("data.task") {
            cfg.data.task = v.parse()?;
        }
        if let Some(v) = get("data.size") {
            cfg.data.size = parse("data.size", v)?;
        }
        if let Some(v) = get("data.seed") {
            cfg.data.seed = parse("data.seed", v)?;
        }
        if let Some(v) = get("data.csv") {
            cfg.data.csv = Some(PathBuf::from(v));
        }
        cfg.budget_bytes = match (get("budget.bytes"), get("budget.gb")) {
            (Some(_), Some(_)) => return Err(BenchError::Config("set budget.bytes or budget.gb, not both".into())),
            (Some(v), None) => Some(parse("budget.bytes", v)?),
            (None, Some(v)) => Some(zolab_core::footprint::gb_to_bytes(parse("budget.gb", v)?)),
            (None, None) => None,
        };
        if let Some(v) = get("report.out_dir") {
            cfg.out_dir = Some(PathBuf::from(v));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(BenchError::Config("train.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(BenchError::Config("train.batch_size must be at least 1".into()));
        }
        if self.data.csv.is_none() && self.data.size < self.batch_size {
            return Err(BenchError::Config(format!(
                "data.size {} is smaller than train.batch_size {}",
                self.data.size, self.batch_size
            )));
        }
        if self.budget_bytes == Some(0) {
            return Err(BenchError::Config("budget must be positive".into()));
        }
        match &self.optimizer {
            OptimizerSpec::Mezo(z) => {
                z.validate()?;
                if z.parallel && z.probes < 2 {
                    return Err(BenchError::Config("opt.parallel needs opt.probes >= 2".into()));
                }
            }
            OptimizerSpec::Adam(a) => a.validate()?,
            OptimizerSpec::Sgd { lr } if !(*lr >= 0.0) => {
                return Err(BenchError::Config(format!("invalid learning rate {lr}")))
            }
            OptimizerSpec::Sgd { .. } => {}
        }
        Ok(())
    }

    /// Replaces the optimizer family, keeping the learning rate only when the
    /// family is unchanged.
    pub fn with_family(&self, family: OptimizerFamily) -> Self {
        let mut c = self.clone();
        if c.optimizer.family() != family {
            c.optimizer = OptimizerSpec::default_for(family);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str) -> Result<RunConfig> {
        ConfigMap::parse(text, Path::new("t.conf"))?.build()
    }

    #[test]
    fn defaults_and_overrides() {
        let c = p("# toy\nopt.kind = adam\nopt.lr = 0.01 # trailing\ntrain.batch_size=4\n").unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.optimizer, OptimizerSpec::Adam(AdamConfig { lr: 0.01, ..AdamConfig::default() }));
        let c = p("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(matches!(p("model.width = 3"), Err(BenchError::ConfigFile { line: 1, .. })));
        assert!(matches!(p("train.steps=1\ntrain.steps=2"), Err(BenchError::ConfigFile { line: 2, .. })));
        assert!(matches!(p("no equals sign"), Err(BenchError::ConfigFile { .. })));
    }

    #[test]
    fn keys_must_match_optimizer() {
        assert!(p("opt.kind = adam\nopt.epsilon = 1e-3").is_err());
        assert!(p("opt.kind = mezo\nopt.beta1 = 0.5").is_err());
        assert!(p("opt.kind = sgd\nopt.probes = 2").is_err());
    }

    #[test]
    fn invalid_values_fail() {
        assert!(p("train.steps = 0").is_err());
        assert!(p("train.batch_size = 0").is_err());
        assert!(p("model.dim = 65").is_err());
        assert!(p("opt.epsilon = -1").is_err());
        assert!(p("opt.kind = rmsprop").is_err());
        assert!(p("model.preset = roberta-large").is_err());
        assert!(p("data.size = 4\ntrain.batch_size = 8").is_err());
        assert!(p("opt.parallel = true").is_err());
        assert!(p("budget.bytes = 10\nbudget.gb = 1").is_err());
    }

    #[test]
    fn every_error_maps_to_exit_code_two() {
        for text in ["model.width = 3", "train.steps = 0", "model.dim = 65"] {
            assert_eq!(p(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }
}
