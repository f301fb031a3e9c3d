//! Scoring with a trained model and text-overlap metrics.
//!
//! Model scores use next-token semantics: the logits at position `p` are
//! the distribution of the token that follows position `p`.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ANSWER_TOKENS};
use crate::error::{Error, Result};
use crate::model::{GlmModel, TokenBatch};
use crate::params::Binder;
use crate::split::{ClientFront, ClientTail, ServerBody};
use crate::tensor::{Tape, Tensor, IGNORE_INDEX};

/// Anything that maps a token batch to `L × B × V` logits: the monolith or
/// the three split parts composed.
pub trait LanguageModel {
    fn batch_logits(&self, tokens: &TokenBatch) -> Result<Tensor>;

    /// Logits `len × V` for one sequence.
    fn sequence_logits(&self, x: &[usize]) -> Result<Tensor> {
        let t = self.batch_logits(&TokenBatch::single(x))?;
        let v = t.shape()[2];
        t.reshape(vec![x.len(), v])
    }
}

impl LanguageModel for GlmModel {
    fn batch_logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (_, _, logits) = self.forward_recorded(&mut tape, &mut binder, tokens)?;
        Ok(tape.tensor(logits))
    }
}

/// Borrowed split parts scored as one model, without caching anything.
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub front: &'a ClientFront,
    pub body: &'a ServerBody,
    pub tail: &'a ClientTail,
}

impl LanguageModel for SplitView<'_> {
    fn batch_logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let h0 = self.front.infer(tokens)?;
        let h = self.body.infer(&h0)?;
        self.tail.logits(&h)
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// `p(y|x) = p(a(y)|q(x)) / Σ_y' p(a(y')|q(x))` from one row of logits; the
/// full-vocabulary normaliser cancels, leaving a softmax over the answer
/// tokens' logits.
pub fn label_prob_from_logits(row: &[f64], answer_tokens: &[usize]) -> Result<Vec<f64>> {
    if answer_tokens.is_empty() {
        return Err(Error::Contract("label set is empty".into()));
    }
    let z: Vec<f64> = answer_tokens
        .iter()
        .map(|&a| {
            row.get(a).copied().ok_or(Error::Index {
                what: "answer token",
                index: a,
                bound: row.len(),
            })
        })
        .collect::<Result<_>>()?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Label distribution for the cloze input `x`, read at `position` (usually
/// the mask). Every answer must be a single token.
pub fn label_prob<M: LanguageModel + ?Sized>(model: &M, x: &[usize], position: usize, answers: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut tokens = Vec::with_capacity(answers.len());
    for a in answers {
        match a.as_slice() {
            [t] => tokens.push(*t),
            _ => {
                return Err(Error::Contract(format!(
                    "label_prob needs single-token answers, got {} tokens; use multi_token_score",
                    a.len()
                )))
            }
        }
    }
    if position >= x.len() {
        return Err(Error::Index {
            what: "cloze position",
            index: position,
            bound: x.len(),
        });
    }
    let logits = model.sequence_logits(x)?;
    let v = logits.shape()[1];
    label_prob_from_logits(&logits.data()[position * v..(position + 1) * v], &tokens)
}

/// `Σ_t log P(y_t | x, y_<t)`, feeding `x ++ y[..n-1]` once.
pub fn multi_token_score<M: LanguageModel + ?Sized>(model: &M, context: &[usize], answer: &[usize]) -> Result<f64> {
    if context.is_empty() || answer.is_empty() {
        return Err(Error::Contract("scoring needs a non-empty context and answer".into()));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(&answer[..answer.len() - 1]);
    let logits = model.sequence_logits(&seq)?;
    let v = logits.shape()[1];
    let mut s = 0.0;
    for (t, &y) in answer.iter().enumerate() {
        let p = context.len() - 1 + t;
        let lp = log_softmax(&logits.data()[p * v..(p + 1) * v]);
        s += *lp.get(y).ok_or(Error::Index {
            what: "answer token",
            index: y,
            bound: v,
        })?;
    }
    Ok(s)
}

/// Whitespace split after lowercasing.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<T: Eq + Hash>(x: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && x.len() >= n {
        for w in x.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> usize {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn empty_reference(metric: &str) -> f64 {
    log::warn!("{metric}: empty reference, scoring 0");
    0.0
}

/// N-gram overlap F1 with clipped counts.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    if reference.is_empty() {
        return empty_reference("rouge_n");
    }
    if n == 0 {
        return 0.0;
    }
    let nc = cand.len().saturating_sub(n - 1);
    let nr = reference.len().saturating_sub(n - 1);
    if nc == 0 || nr == 0 {
        return 0.0;
    }
    let m = clipped_overlap(cand, reference, n) as f64;
    f1(m / nc as f64, m / nr as f64)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return empty_reference("rouge_l");
    }
    if cand.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    f1(l / cand.len() as f64, l / reference.len() as f64)
}

/// Sentence BLEU with uniform weights over orders `1..=min(4, |cand|, |ref|)`
/// and the brevity penalty. Any zero precision gives 0 (no smoothing).
pub fn bleu_4<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return empty_reference("bleu_4");
    }
    let order = 4.min(cand.len()).min(reference.len());
    if order == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=order {
        let m = clipped_overlap(cand, reference, n);
        if m == 0 {
            return 0.0;
        }
        log_p += (m as f64 / (cand.len() + 1 - n) as f64).ln() / order as f64;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * log_p.exp()
}

/// Fraction of reference positions reproduced exactly.
pub fn token_accuracy<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return empty_reference("token_accuracy");
    }
    cand.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / reference.len() as f64
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() || gold.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy needs equal non-empty lists, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64)
}

/// Mean per-pair scores, all fractions in `[0, 1]`. `accuracy` is token
/// accuracy for reconstructions and label accuracy for classification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub bleu_4: f64,
}

impl Scores {
    /// Averages sentence-level metrics over aligned `(candidate, reference)`
    /// pairs.
    pub fn of_pairs<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Self {
        if pairs.is_empty() {
            return Self::default();
        }
        let n = pairs.len() as f64;
        let mut s = Self::default();
        for (c, r) in pairs {
            s.accuracy += token_accuracy(c, r) / n;
            s.rouge_1 += rouge_n(c, r, 1) / n;
            s.rouge_2 += rouge_n(c, r, 2) / n;
            s.rouge_l += rouge_l(c, r) / n;
            s.bleu_4 += bleu_4(c, r) / n;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Scores averaged over seeds, with the breakdown kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub mean: Scores,
    pub per_seed: Vec<SeedScores>,
}

impl MetricReport {
    pub fn from_seeds(per_seed: Vec<SeedScores>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let mut mean = Scores::default();
        for s in &per_seed {
            mean.accuracy += s.scores.accuracy / n;
            mean.rouge_1 += s.scores.rouge_1 / n;
            mean.rouge_2 += s.scores.rouge_2 / n;
            mean.rouge_l += s.scores.rouge_l / n;
            mean.bleu_4 += s.scores.bleu_4 / n;
        }
        Self { mean, per_seed }
    }
}

/// Held-out evaluation of a trained model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    /// Mean cross-entropy over trained positions.
    pub loss: f64,
    /// Argmax hits over trained positions.
    pub token_accuracy: f64,
    /// Label accuracy via [`label_prob`], for classification data.
    pub label_accuracy: Option<f64>,
}

pub fn evaluate_dataset<M: LanguageModel + ?Sized>(model: &M, data: &Dataset) -> Result<DatasetEval> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut count = 0usize;
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for s in &data.samples {
        let logits = model.sequence_logits(&s.input)?;
        let v = logits.shape()[1];
        for (p, &y) in s.target.iter().enumerate() {
            if y == IGNORE_INDEX {
                continue;
            }
            let row = &logits.data()[p * v..(p + 1) * v];
            loss -= log_softmax(row)[y];
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &z)| if z > acc.1 { (i, z) } else { acc })
                .0;
            hits += usize::from(arg == y);
            count += 1;
        }
        if let Some(label) = s.label {
            let row = &logits.data()[(s.input.len() - 1) * v..s.input.len() * v];
            let p = label_prob_from_logits(row, &ANSWER_TOKENS)?;
            preds.push(usize::from(p[1] > p[0]));
            golds.push(label);
        }
    }
    if count == 0 {
        return Err(Error::Contract("evaluation set has no trained positions".into()));
    }
    Ok(DatasetEval {
        loss: loss / count as f64,
        token_accuracy: hits as f64 / count as f64,
        label_accuracy: if golds.is_empty() { None } else { Some(accuracy(&preds, &golds)?) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identical_and_disjoint() {
        let a = words("The cat sat on the mat");
        for m in [rouge_n(&a, &a, 1), rouge_n(&a, &a, 2), rouge_l(&a, &a), bleu_4(&a, &a)] {
            assert!((m - 1.0).abs() < 1e-12);
        }
        let b = words("dogs run far away quickly now");
        for m in [rouge_n(&a, &b, 1), rouge_n(&a, &b, 2), rouge_l(&a, &b), bleu_4(&a, &b)] {
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn empty_reference_scores_zero() {
        let a = words("x y");
        let e: Vec<String> = Vec::new();
        assert_eq!(rouge_n(&a, &e, 1), 0.0);
        assert_eq!(rouge_l(&a, &e), 0.0);
        assert_eq!(bleu_4(&a, &e), 0.0);
    }

    #[test]
    fn short_identical_strings_score_one() {
        let a = words("hi there");
        assert!((bleu_4(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_folds_case() {
        assert_eq!(tokenize("  The\tCAT  sat\n"), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn multi_token_answers_rejected() {
        let m = GlmModel::new(
            crate::ModelConfig {
                n_blocks: 3,
                hidden: 8,
                heads: 2,
                vocab: 10,
                max_seq_len: 6,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(matches!(label_prob(&m, &[1, 2], 1, &[vec![3], vec![4, 5]]), Err(Error::Contract(_))));
        assert!(label_prob(&m, &[1, 2], 1, &[vec![3], vec![4]]).is_ok());
    }
}
