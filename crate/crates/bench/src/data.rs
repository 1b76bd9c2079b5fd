//! Synthetic classification tasks and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zolab_core::Batch;

use crate::error::{BenchError, Result};

pub const PAD: u32 = 0;
/// Tokens whose presence makes a marker-detect sequence positive.
pub const MARKERS: [u32; 5] = [1, 2, 3, 4, 5];
const FIRST_PLAIN: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// `y = 1` iff the sequence contains a marker token.
    MarkerDetect,
    /// `y` is the parity of the number of odd token ids.
    Parity,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::MarkerDetect => "marker-detect",
            Task::Parity => "parity",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marker-detect" => Ok(Task::MarkerDetect),
            "parity" => Ok(Task::Parity),
            other => Err(BenchError::Config(format!("unknown task `{other}` (expected marker-detect or parity)"))),
        }
    }
}

/// Labelled token sequences, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    tokens: Vec<u32>,
    labels: Vec<u32>,
    seq_len: usize,
}

impl Dataset {
    pub fn new(tokens: Vec<u32>, labels: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || tokens.len() != labels.len() * seq_len {
            return Err(BenchError::Config(format!(
                "{} tokens do not form {} rows of length {seq_len}",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Self { tokens, labels, seq_len })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn positive_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&y| y == 1).count() as f64 / self.len() as f64
    }

    /// Number of whole batches of `batch_size` rows.
    pub fn batches(&self, batch_size: usize) -> usize {
        self.len() / batch_size.max(1)
    }

    /// The `index`-th batch, cycling over whole batches.
    pub fn batch(&self, index: usize, batch_size: usize) -> Result<Batch> {
        let n = self.batches(batch_size);
        if batch_size == 0 || n == 0 {
            return Err(BenchError::Config(format!(
                "dataset of {} rows cannot fill a batch of {batch_size}",
                self.len()
            )));
        }
        let start = (index % n) * batch_size;
        let rows = start..start + batch_size;
        let tokens = self.tokens[rows.start * self.seq_len..rows.end * self.seq_len].to_vec();
        Ok(Batch::new(tokens, self.labels[rows].to_vec(), self.seq_len)?)
    }
}

pub fn contains_marker(row: &[u32]) -> bool {
    row.iter().any(|t| MARKERS.contains(t))
}

/// Deterministic in `seed`. Labels are exactly balanced up to one row; each
/// sequence has a random length in `[seq_len/2, seq_len]` and is padded with
/// [`PAD`].
pub fn generate_dataset(task: Task, size: usize, vocab: usize, seq_len: usize, seed: u64) -> Result<Dataset> {
    if size == 0 || seq_len == 0 {
        return Err(BenchError::Config("dataset size and seq_len must be positive".into()));
    }
    if vocab <= FIRST_PLAIN as usize + 1 {
        return Err(BenchError::Config(format!(
            "vocab {vocab} leaves no room for plain tokens (need more than {})",
            FIRST_PLAIN + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u32> = (0..size).map(|i| (i % 2) as u32).collect();
    labels.shuffle(&mut rng);
    let mut tokens = vec![PAD; size * seq_len];
    for (row, &label) in tokens.chunks_exact_mut(seq_len).zip(&labels) {
        let len = rng.gen_range(seq_len.div_ceil(2)..=seq_len);
        let body = &mut row[..len];
        for t in body.iter_mut() {
            *t = rng.gen_range(FIRST_PLAIN..vocab as u32);
        }
        match task {
            Task::MarkerDetect => {
                if label == 1 {
                    for _ in 0..rng.gen_range(1..=3) {
                        let at = rng.gen_range(0..len);
                        body[at] = MARKERS[rng.gen_range(0..MARKERS.len())];
                    }
                }
            }
            Task::Parity => {
                let odd = body.iter().filter(|&&t| t % 2 == 1).count() as u32;
                if odd % 2 != label {
                    // flip the parity of one token without leaving the plain range
                    let at = rng.gen_range(0..len);
                    body[at] = if body[at] + 1 < vocab as u32 { body[at] + 1 } else { body[at] - 1 };
                }
            }
        }
    }
    Dataset::new(tokens, labels, seq_len)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace-split words hashed into `[1, vocab)`; id 0 stays reserved for
/// padding, which is also what empty text maps to.
pub fn tokenize_hashing(text: &str, vocab_size: usize) -> Result<Vec<u32>> {
    if vocab_size < 2 {
        return Err(BenchError::Config(format!("vocab_size must be at least 2, got {vocab_size}")));
    }
    let ids: Vec<u32> =
        text.split_whitespace().map(|w| 1 + (fnv1a64(w.as_bytes()) % (vocab_size as u64 - 1)) as u32).collect();
    if ids.is_empty() {
        return Ok(vec![PAD]);
    }
    Ok(ids)
}

/// Reads `text,label` rows (with header), hashing and padding/truncating each
/// text to `seq_len`.
pub fn load_csv(path: &Path, vocab_size: usize, seq_len: usize, classes: usize) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let (text, label) = match (rec.get(0), rec.get(1)) {
            (Some(t), Some(l)) => (t, l),
            _ => return Err(BenchError::Config(format!("{}: row {} needs text,label", path.display(), i + 1))),
        };
        let label: u32 = label.trim().parse().ok().filter(|&l| (l as usize) < classes).ok_or_else(|| {
            BenchError::Config(format!("{}: row {} has invalid label `{label}`", path.display(), i + 1))
        })?;
        let mut ids = tokenize_hashing(text, vocab_size)?;
        ids.resize(seq_len, PAD);
        tokens.extend(ids);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(BenchError::Config(format!("{}: no rows", path.display())));
    }
    Dataset::new(tokens, labels, seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(Task::MarkerDetect, 200, 100, 16, 9).unwrap();
        let b = generate_dataset(Task::MarkerDetect, 200, 100, 16, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(Task::MarkerDetect, 200, 100, 16, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn marker_labels_and_balance() {
        let d = generate_dataset(Task::MarkerDetect, 10_000, 1000, 32, 1).unwrap();
        let frac = d.positive_fraction();
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        for i in 0..d.len() {
            assert_eq!(contains_marker(d.row(i)), d.labels()[i] == 1, "row {i}");
        }
    }

    #[test]
    fn parity_labels() {
        let d = generate_dataset(Task::Parity, 500, 50, 12, 3).unwrap();
        for i in 0..d.len() {
            let odd = d.row(i).iter().filter(|&&t| t != PAD && t % 2 == 1).count() as u32;
            assert_eq!(odd % 2, d.labels()[i]);
        }
    }

    #[test]
    fn invalid_sizes() {
        assert!(generate_dataset(Task::Parity, 0, 50, 12, 3).is_err());
        assert!(generate_dataset(Task::Parity, 10, 7, 12, 3).is_err());
        let d = generate_dataset(Task::Parity, 10, 50, 12, 3).unwrap();
        assert!(d.batch(0, 11).is_err());
    }

    #[test]
    fn batches_cycle() {
        let d = generate_dataset(Task::MarkerDetect, 20, 50, 8, 3).unwrap();
        assert_eq!(d.batches(8), 2);
        assert_eq!(d.batch(0, 8).unwrap(), d.batch(2, 8).unwrap());
        assert_ne!(d.batch(0, 8).unwrap(), d.batch(1, 8).unwrap());
    }

    #[test]
    fn hashing_tokenizer() {
        assert_eq!(tokenize_hashing("", 100).unwrap(), vec![PAD]);
        assert_eq!(tokenize_hashing("   ", 100).unwrap(), vec![PAD]);
        let t = tokenize_hashing("a a a", 100).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|&x| x == t[0]));
        assert_eq!(tokenize_hashing("the cat", 50).unwrap(), tokenize_hashing("the  cat\n", 50).unwrap());
        assert!(tokenize_hashing("x", 1).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn frozen_token_ids() {
        assert_eq!(tokenize_hashing("zeroth order", 1000).unwrap(), FROZEN_IDS.to_vec());
    }

    const FROZEN_IDS: [u32; 2] = [417, 420];
}
