use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Dtype;

/// Pre-norm transformer encoder classifier dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub dtype: Dtype,
}

impl ModelConfig {
    /// The default desk-scale model: vocab 1000, d=64, 2 layers, 4 heads,
    /// sequence length 32, 2 classes.
    pub const fn toy() -> Self {
        Self { vocab_size: 1000, dim: 64, layers: 2, heads: 4, seq_len: 32, classes: 2, dtype: Dtype::F32 }
    }

    pub const fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("classes", self.classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.vocab_size < self.classes {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than classes {}",
                self.vocab_size, self.classes
            )));
        }
        if self.dtype == Dtype::F16 {
            return Err(Error::Config("f16 is supported for byte accounting only".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn param_count(&self) -> usize {
        param_count_for(self.vocab_size, self.dim, self.layers, self.seq_len, self.classes)
    }

    pub fn layout(&self) -> Layout {
        Layout::for_config(self)
    }
}

/// Closed-form parameter count of the architecture:
/// `V·d + s·d + L·(12d² + 13d) + d·C + C`.
pub fn param_count_for(vocab: usize, dim: usize, layers: usize, seq_len: usize, classes: usize) -> usize {
    let per_layer = 12 * dim * dim + 13 * dim;
    vocab * dim + seq_len * dim + layers * per_layer + dim * classes + classes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub head_w: usize,
    pub head_b: usize,
}

/// Ordered tensor map of the flat parameter vector. A pure function of the
/// model config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    offsets: Offsets,
    param_count: usize,
}

impl Layout {
    fn for_config(cfg: &ModelConfig) -> Self {
        let (v, d, s, c, m) = (cfg.vocab_size, cfg.dim, cfg.seq_len, cfg.classes, cfg.mlp_dim());
        let mut tensors = Vec::new();
        let mut cursor = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = cursor;
            cursor += shape.iter().product::<usize>();
            tensors.push(TensorSpec { name, offset, shape });
            offset
        };
        let tok_emb = push("embed.tokens".into(), vec![v, d]);
        let pos_emb = push("embed.positions".into(), vec![s, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            blocks.push(BlockOffsets {
                ln1_gain: push(p("ln1.gain"), vec![d]),
                ln1_bias: push(p("ln1.bias"), vec![d]),
                wq: push(p("attn.wq"), vec![d, d]),
                bq: push(p("attn.bq"), vec![d]),
                wk: push(p("attn.wk"), vec![d, d]),
                bk: push(p("attn.bk"), vec![d]),
                wv: push(p("attn.wv"), vec![d, d]),
                bv: push(p("attn.bv"), vec![d]),
                wo: push(p("attn.wo"), vec![d, d]),
                bo: push(p("attn.bo"), vec![d]),
                ln2_gain: push(p("ln2.gain"), vec![d]),
                ln2_bias: push(p("ln2.bias"), vec![d]),
                w1: push(p("mlp.w1"), vec![d, m]),
                b1: push(p("mlp.b1"), vec![m]),
                w2: push(p("mlp.w2"), vec![m, d]),
                b2: push(p("mlp.b2"), vec![d]),
            });
        }
        let head_w = push("head.w".into(), vec![d, c]);
        let head_b = push("head.b".into(), vec![c]);
        Self { tensors, offsets: Offsets { tok_emb, pos_emb, blocks, head_w, head_b }, param_count: cursor }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub(crate) fn offsets(&self) -> &Offsets {
        &self.offsets
    }
}
