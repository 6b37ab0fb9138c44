//! Seeded delayed-copy task.
//!
//! A sample reads `BOS x₁ … x_k SEP y₁ … y_k` where `y_i = π(x_i)` for a
//! fixed seeded permutation `π` of the content tokens, and each `y_i` is
//! replaced by a random content token with probability `noise`. Only the
//! positions that predict a `y_i` are supervised.

use crate::error::{dim_err, PhmError, Result};
use crate::linalg::SeededRng;
use crate::loss::IGNORE_INDEX;

use super::config::TaskConfig;

pub const BOS: usize = 0;
pub const SEP: usize = 1;
const FIRST_CONTENT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub labels: Vec<i64>,
}

/// `seqs` sequences of equal length, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seqs: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<i64>,
}

impl Batch {
    pub fn new(seqs: usize, len: usize, tokens: Vec<usize>, labels: Vec<i64>) -> Result<Self> {
        if seqs == 0 || len == 0 {
            return Err(PhmError::EmptyBatch);
        }
        if tokens.len() != seqs * len || labels.len() != tokens.len() {
            return dim_err(format!(
                "batch of {seqs}x{len} got {} tokens and {} labels",
                tokens.len(),
                labels.len()
            ));
        }
        Ok(Self { seqs, len, tokens, labels })
    }

    /// All labels ignored.
    pub fn unlabeled(seqs: usize, len: usize, tokens: Vec<usize>) -> Result<Self> {
        let n = tokens.len();
        Self::new(seqs, len, tokens, vec![IGNORE_INDEX; n])
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or(PhmError::EmptyBatch)?;
        let len = first.tokens.len();
        let mut tokens = Vec::with_capacity(samples.len() * len);
        let mut labels = Vec::with_capacity(samples.len() * len);
        for s in samples {
            if s.tokens.len() != len {
                return dim_err("samples in a batch must share one length");
            }
            tokens.extend_from_slice(&s.tokens);
            labels.extend_from_slice(&s.labels);
        }
        Self::new(samples.len(), len, tokens, labels)
    }

    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: TaskConfig,
    vocab: usize,
    mapping: Vec<usize>,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig, vocab: usize, seed: u64) -> Result<Self> {
        if vocab < FIRST_CONTENT + 2 {
            return Err(PhmError::Config(format!("vocabulary {vocab} leaves fewer than two content tokens")));
        }
        if config.content_len == 0 {
            return Err(PhmError::Config("content_len must be positive".into()));
        }
        let mut rng = SeededRng::new(seed).fork(0x7461_736b);
        let mut mapping: Vec<usize> = (FIRST_CONTENT..vocab).collect();
        for i in (1..mapping.len()).rev() {
            let j = rng.below(i + 1);
            mapping.swap(i, j);
        }
        Ok(Self { config, vocab, mapping, seed })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    /// Input length of every sample.
    pub fn seq_len(&self) -> usize {
        2 * self.config.content_len + 1
    }

    /// Clean answer for a content token.
    pub fn target_of(&self, x: usize) -> usize {
        self.mapping[x - FIRST_CONTENT]
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Sample {
        let k = self.config.content_len;
        let content = self.vocab - FIRST_CONTENT;
        let xs: Vec<usize> = (0..k).map(|_| FIRST_CONTENT + rng.below(content)).collect();
        let ys: Vec<usize> = xs
            .iter()
            .map(|&x| {
                if rng.uniform() < self.config.noise {
                    FIRST_CONTENT + rng.below(content)
                } else {
                    self.target_of(x)
                }
            })
            .collect();
        let mut full = Vec::with_capacity(2 * k + 2);
        full.push(BOS);
        full.extend_from_slice(&xs);
        full.push(SEP);
        full.extend_from_slice(&ys);
        let tokens = full[..full.len() - 1].to_vec();
        let labels = (0..tokens.len())
            .map(|p| if p >= k + 1 { full[p + 1] as i64 } else { IGNORE_INDEX })
            .collect();
        Sample { tokens, labels }
    }

    /// Stream used for dense pretraining, independent of the fine-tuning set.
    pub fn pretrain_rng(&self) -> SeededRng {
        SeededRng::new(self.seed).fork(0x7072_6574)
    }

    /// Fixed fine-tuning set split into (train, validation).
    pub fn finetune_split(&self) -> (Vec<Sample>, Vec<Sample>) {
        let mut rng = SeededRng::new(self.seed).fork(0x6674_756e);
        let total = self.config.finetune_samples.max(2);
        let samples: Vec<Sample> = (0..total).map(|_| self.sample(&mut rng)).collect();
        let n_val = ((total as f64 * self.config.val_fraction).round() as usize).clamp(1, total - 1);
        let mut train = samples;
        let val = train.split_off(total - n_val);
        (train, val)
    }
}
