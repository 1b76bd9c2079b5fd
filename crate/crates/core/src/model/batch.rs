use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Token ids `[batch_size × seq_len]`, row-major, with one label per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    tokens: Vec<u32>,
    labels: Vec<u32>,
    seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<u32>, labels: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Precondition("seq_len must be at least 1".into()));
        }
        if tokens.len() != labels.len() * seq_len {
            return Err(Error::Precondition(format!(
                "{} tokens do not form {} rows of length {seq_len}",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Self { tokens, labels, seq_len })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// The same batch with every row repeated `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() * times);
        let mut labels = Vec::with_capacity(self.labels.len() * times);
        for b in 0..self.batch_size() {
            for _ in 0..times {
                tokens.extend_from_slice(self.row(b));
                labels.push(self.labels[b]);
            }
        }
        Self { tokens, labels, seq_len: self.seq_len }
    }

    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        if self.batch_size() == 0 {
            return Err(Error::Precondition("batch is empty".into()));
        }
        if self.seq_len != cfg.seq_len {
            return Err(Error::Precondition(format!(
                "batch seq_len {} does not match model seq_len {}",
                self.seq_len, cfg.seq_len
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Precondition(format!("token id {t} out of range for vocab {}", cfg.vocab_size)));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y as usize >= cfg.classes) {
            return Err(Error::Precondition(format!("label {y} out of range for {} classes", cfg.classes)));
        }
        Ok(())
    }
}
