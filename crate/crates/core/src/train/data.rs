use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Batch;
use crate::rng::SeedTree;
use crate::{Error, Result};

use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Next-byte prediction over a corpus file (vocabulary 256).
    Bytes,
    /// Random tokens; the target at position `i` is the input at `i - offset`.
    Copy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    /// Corpus for `bytes`.
    pub path: Option<PathBuf>,
    pub copy_offset: usize,
    /// Token range for `copy`; the model vocabulary when unset.
    pub copy_vocab: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Bytes,
            path: None,
            copy_offset: 8,
            copy_vocab: None,
        }
    }
}

/// Deterministic batch source with a held-out split.
#[derive(Debug, Clone)]
pub struct DataStream {
    task: Task,
    bytes: Vec<u8>,
    train_end: usize,
    seeds: SeedTree,
    batch: usize,
    seq: usize,
    copy_offset: usize,
    copy_vocab: usize,
}

impl DataStream {
    /// Opens the configured source for a model with `vocab` tokens.
    pub fn open(data: &DataConfig, train: &TrainConfig, vocab: usize) -> Result<Self> {
        match data.task {
            Task::Bytes => {
                let path = data.path.as_deref().ok_or_else(|| Error::Config("task `bytes` needs data.path".into()))?;
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Self::from_bytes(bytes, train, vocab).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                    e => e,
                })
            }
            Task::Copy => Self::copy(train, vocab, data.copy_offset, data.copy_vocab.unwrap_or(vocab)),
        }
    }

    /// Byte-level stream; the last `val_fraction` of the bytes is held out.
    pub fn from_bytes(bytes: Vec<u8>, train: &TrainConfig, vocab: usize) -> Result<Self> {
        if vocab < 256 {
            return Err(Error::Config(format!("byte data needs a vocabulary of at least 256, model has {vocab}")));
        }
        let val = (bytes.len() as f64 * train.val_fraction).floor() as usize;
        let train_end = bytes.len() - val;
        let need = train.seq_len + 1;
        if train_end <= need || val < need {
            return Err(Error::Config(format!(
                "{} bytes is too short for sequences of {} with val_fraction {}",
                bytes.len(),
                train.seq_len,
                train.val_fraction
            )));
        }
        Ok(Self {
            task: Task::Bytes,
            bytes,
            train_end,
            seeds: SeedTree::new(train.seed),
            batch: train.batch_size,
            seq: train.seq_len,
            copy_offset: 0,
            copy_vocab: 256,
        })
    }

    pub fn copy(train: &TrainConfig, vocab: usize, offset: usize, copy_vocab: usize) -> Result<Self> {
        if copy_vocab == 0 || copy_vocab > vocab {
            return Err(Error::Config(format!("copy_vocab must lie in 1..={vocab}, got {copy_vocab}")));
        }
        if offset == 0 || offset >= train.seq_len {
            return Err(Error::Config(format!("copy_offset must lie in 1..{}, got {offset}", train.seq_len)));
        }
        Ok(Self {
            task: Task::Copy,
            bytes: Vec::new(),
            train_end: 0,
            seeds: SeedTree::new(train.seed),
            batch: train.batch_size,
            seq: train.seq_len,
            copy_offset: offset,
            copy_vocab,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Byte ranges of the two splits (empty for synthetic tasks).
    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.train_end
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.train_end..self.bytes.len()
    }

    /// Training batch for update number `step`.
    pub fn train_batch(&self, step: u64) -> Batch {
        let mut rng = self.seeds.stream("data.train", step);
        match self.task {
            Task::Bytes => {
                let hi = self.train_end - self.seq - 1;
                let starts: Vec<usize> = (0..self.batch).map(|_| rng.random_range(0..=hi)).collect();
                self.windows(&starts)
            }
            Task::Copy => self.copy_batch(&mut rng, self.batch),
        }
    }

    /// Held-out batches covering at most `max_sequences` sequences (0: all windows).
    pub fn val_batches(&self, max_sequences: usize) -> Vec<Batch> {
        match self.task {
            Task::Bytes => {
                let avail = (self.bytes.len() - self.train_end - 1) / self.seq;
                let n = if max_sequences == 0 { avail } else { max_sequences.min(avail) };
                let starts: Vec<usize> = (0..n).map(|i| self.train_end + i * self.seq).collect();
                starts.chunks(self.batch).map(|c| self.windows(c)).collect()
            }
            Task::Copy => {
                let n = if max_sequences == 0 { self.batch * 8 } else { max_sequences };
                let mut rng = self.seeds.stream("data.val", 0);
                let mut out = Vec::new();
                let mut left = n;
                while left > 0 {
                    let b = left.min(self.batch);
                    out.push(self.copy_batch(&mut rng, b));
                    left -= b;
                }
                out
            }
        }
    }

    fn windows(&self, starts: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(starts.len() * self.seq);
        let mut targets = Vec::with_capacity(starts.len() * self.seq);
        for &s in starts {
            inputs.extend(self.bytes[s..s + self.seq].iter().map(|&b| b as usize));
            targets.extend(self.bytes[s + 1..s + self.seq + 1].iter().map(|&b| b as usize));
        }
        Batch {
            inputs,
            targets,
            sequences: starts.len(),
            scored: None,
        }
    }

    fn copy_batch(&self, rng: &mut impl Rng, sequences: usize) -> Batch {
        let (seq, off) = (self.seq, self.copy_offset);
        let inputs: Vec<usize> = (0..sequences * seq).map(|_| rng.random_range(0..self.copy_vocab)).collect();
        let mut targets = vec![0; inputs.len()];
        let mut scored = Vec::with_capacity(sequences * (seq - off));
        for b in 0..sequences {
            for i in off..seq {
                targets[b * seq + i] = inputs[b * seq + i - off];
                scored.push(b * seq + i);
            }
        }
        Batch {
            inputs,
            targets,
            sequences,
            scored: Some(scored),
        }
    }
}
