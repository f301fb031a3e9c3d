//! Synthetic corpora: a copy task for smoke training, a binary cloze
//! classification task with a controllable label count, and Zipfian
//! sentences for the inversion attack.
//!
//! Token 0 is reserved as the mask token `[M]` in every corpus.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::tensor::IGNORE_INDEX;

pub const MASK_TOKEN: usize = 0;

/// One training example. `target` is aligned with `input`; positions holding
/// [`IGNORE_INDEX`] do not contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels of every sample, or `None` if any sample is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the selected samples into a batch plus position-major targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let picked: Vec<&Sample> = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).ok_or(Error::Index {
                    what: "dataset",
                    index: i,
                    bound: self.samples.len(),
                })
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<Vec<usize>> = picked.iter().map(|s| s.input.clone()).collect();
        let targets: Vec<Vec<usize>> = picked.iter().map(|s| s.target.clone()).collect();
        let tokens = TokenBatch::from_sequences(&inputs)?;
        let t = TokenBatch::from_sequences(&targets)?;
        Ok((tokens, t.ids))
    }
}

/// Which synthetic task a run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Every position is trained to reproduce its own input token.
    Copy {
        samples: usize,
        eval_samples: usize,
        seq_len: usize,
        alphabet: usize,
    },
    /// Binary cloze classification; see [`cue_classification`].
    Classification {
        zeros: usize,
        ones: usize,
        eval_samples: usize,
        seq_len: usize,
        /// Probability that a content token is drawn from the other class's
        /// range.
        noise: f64,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Copy {
            samples: 512,
            eval_samples: 64,
            seq_len: 16,
            alphabet: 32,
        }
    }
}

/// Answer tokens of the classification task: label `y` is verbalized as
/// `ANSWER_TOKENS[y]`.
pub const ANSWER_TOKENS: [usize; 2] = [1, 2];
const CLASS_RANGES: [(usize, usize); 2] = [(10, 40), (40, 70)];

impl TaskConfig {
    pub fn validate(&self, vocab: usize, max_seq_len: usize) -> Result<()> {
        let (seq_len, need_vocab) = match *self {
            TaskConfig::Copy {
                samples,
                seq_len,
                alphabet,
                ..
            } => {
                if samples == 0 || alphabet == 0 {
                    return Err(Error::Config("copy task needs samples and a non-empty alphabet".into()));
                }
                (seq_len, alphabet + 1)
            }
            TaskConfig::Classification {
                zeros, ones, seq_len, noise, ..
            } => {
                if zeros + ones == 0 || seq_len < 2 || !(0.0..=1.0).contains(&noise) {
                    return Err(Error::Config(
                        "classification task needs samples, seq_len ≥ 2 and noise in [0, 1]".into(),
                    ));
                }
                (seq_len, CLASS_RANGES[1].1)
            }
        };
        if seq_len == 0 || seq_len > max_seq_len {
            return Err(Error::Config(format!("task seq_len {seq_len} must be in 1..={max_seq_len}")));
        }
        if need_vocab > vocab {
            return Err(Error::Config(format!("task needs a vocabulary of {need_vocab}, model has {vocab}")));
        }
        Ok(())
    }

    /// Training and held-out sets, both drawn from `seed`.
    pub fn build(&self, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            TaskConfig::Copy {
                samples,
                eval_samples,
                seq_len,
                alphabet,
            } => (
                copy_task(samples, seq_len, alphabet, &mut rng),
                copy_task(eval_samples, seq_len, alphabet, &mut rng),
            ),
            TaskConfig::Classification {
                zeros,
                ones,
                eval_samples,
                seq_len,
                noise,
            } => (
                cue_classification(zeros, ones, seq_len, noise, &mut rng),
                cue_classification(eval_samples / 2, eval_samples - eval_samples / 2, seq_len, noise, &mut rng),
            ),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskConfig::Classification { .. })
    }
}

/// Random sequences over tokens `1..=alphabet`; targets equal inputs.
pub fn copy_task<R: Rng + ?Sized>(n: usize, seq_len: usize, alphabet: usize, rng: &mut R) -> Dataset {
    let samples = (0..n)
        .map(|_| {
            let input: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(1..=alphabet)).collect();
            Sample {
                target: input.clone(),
                input,
                label: None,
            }
        })
        .collect();
    Dataset { samples }
}

/// `zeros` samples of label 0 then `ones` of label 1, shuffled. Each input is
/// `seq_len - 1` content tokens followed by `[M]`; the only trained position
/// is the mask, whose target is the label's answer token. Content tokens
/// come from the label's range, or with probability `noise` from the other.
pub fn cue_classification<R: Rng + ?Sized>(zeros: usize, ones: usize, seq_len: usize, noise: f64, rng: &mut R) -> Dataset {
    let mut samples: Vec<Sample> = std::iter::repeat_n(0, zeros)
        .chain(std::iter::repeat_n(1, ones))
        .map(|label| {
            let mut input: Vec<usize> = (0..seq_len - 1)
                .map(|_| {
                    let class = if rng.gen_bool(noise) { 1 - label } else { label };
                    let (lo, hi) = CLASS_RANGES[class];
                    rng.gen_range(lo..hi)
                })
                .collect();
            input.push(MASK_TOKEN);
            let mut target = vec![IGNORE_INDEX; seq_len];
            target[seq_len - 1] = ANSWER_TOKENS[label];
            Sample {
                input,
                target,
                label: Some(label),
            }
        })
        .collect();
    samples.shuffle(rng);
    Dataset { samples }
}

/// Unigram sampler over tokens `1..vocab` where the token of rank `r` has
/// weight `r^-exponent`. `rank_to_token` fixes which token holds each rank.
#[derive(Debug, Clone)]
pub struct Zipf {
    rank_to_token: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl Zipf {
    pub fn new(vocab: usize, exponent: f64, rank_to_token: Option<Vec<usize>>) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config("Zipf corpus needs at least one non-mask token".into()));
        }
        let rank_to_token = rank_to_token.unwrap_or_else(|| (1..vocab).collect());
        if rank_to_token.len() != vocab - 1 || rank_to_token.iter().any(|&t| t == MASK_TOKEN || t >= vocab) {
            return Err(Error::Config("rank_to_token must list vocab-1 non-mask tokens".into()));
        }
        let weights: Vec<f64> = (1..vocab).map(|r| (r as f64).powf(-exponent)).collect();
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("Zipf weights: {e}")))?;
        Ok(Self { rank_to_token, dist })
    }

    /// Same weights with the rank → token assignment shuffled.
    pub fn shuffled<R: Rng + ?Sized>(vocab: usize, exponent: f64, rng: &mut R) -> Result<Self> {
        let mut order: Vec<usize> = (1..vocab).collect();
        order.shuffle(rng);
        Self::new(vocab, exponent, Some(order))
    }

    pub fn token<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.rank_to_token[self.dist.sample(rng)]
    }

    pub fn sentences<R: Rng + ?Sized>(&self, n: usize, len: usize, rng: &mut R) -> Vec<Vec<usize>> {
        (0..n).map(|_| (0..len).map(|_| self.token(rng)).collect()).collect()
    }
}
