//! Block-stack causal language model used as the monolithic reference, plus
//! trainable per-block prefix key/value tensors.

mod block;
pub mod checkpoint;

pub use block::{Block, PrefixEncoderKind, PrefixKV};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Binder, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    /// Prefix length per block; 0 disables prefix tuning.
    pub prefix_len: usize,
    pub prefix_encoder: PrefixEncoderKind,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            hidden: 64,
            heads: 4,
            vocab: 256,
            max_seq_len: 32,
            prefix_len: 0,
            prefix_encoder: PrefixEncoderKind::Identity,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 3 {
            return Err(Error::Config(format!(
                "n_blocks = {} but a three-way split needs at least 3",
                self.n_blocks
            )));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("vocab, max_seq_len and ffn_mult must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if let PrefixEncoderKind::Mlp { hidden: 0 } = self.prefix_encoder {
            return Err(Error::Config("prefix encoder hidden size must be positive".into()));
        }
        Ok(())
    }

    /// Number of prefix parameters the identity encoder trains:
    /// `N · 2 · L_p · N_h · d_h`.
    pub fn prefix_param_count(&self) -> usize {
        self.n_blocks * 2 * self.prefix_len * self.heads * self.head_dim()
    }
}

/// Token ids laid out position-major (`ids[l * batch + b]`), matching the
/// `L × B × d` activation layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub len: usize,
    pub batch: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn single(seq: &[usize]) -> Self {
        Self {
            len: seq.len(),
            batch: 1,
            ids: seq.to_vec(),
        }
    }

    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::Contract("sequences in a batch must share one length".into()));
        }
        let batch = seqs.len();
        let mut ids = Vec::with_capacity(len * batch);
        for l in 0..len {
            for s in seqs {
                ids.push(s[l]);
            }
        }
        Ok(Self { len, batch, ids })
    }

    pub fn sequence(&self, b: usize) -> Vec<usize> {
        (0..self.len).map(|l| self.ids[l * self.batch + b]).collect()
    }
}

/// Token table plus learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub tokens: Tensor,
    pub positions: Tensor,
}

impl Embedding {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            tokens: Tensor::randn(&[cfg.vocab, cfg.hidden], cfg.init_std, rng).with_requires_grad(true),
            positions: Tensor::randn(&[cfg.max_seq_len, cfg.hidden], cfg.init_std, rng).with_requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, tokens: &TokenBatch) -> Result<Var> {
        if tokens.len == 0 || tokens.batch == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let max_len = self.positions.shape()[0];
        if tokens.len > max_len {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.len,
                bound: max_len,
            });
        }
        let tok = binder.bind(tape, "embedding.tokens".into(), &self.tokens);
        let pos = binder.bind(tape, "embedding.positions".into(), &self.positions);
        let shape = [tokens.len, tokens.batch];
        let e = tape.embedding(tok, &tokens.ids, &shape)?;
        let pos_ids: Vec<usize> = (0..tokens.len).flat_map(|l| std::iter::repeat_n(l, tokens.batch)).collect();
        let p = tape.embedding(pos, &pos_ids, &shape)?;
        tape.add(e, p)
    }
}

impl Parameterized for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "embedding.tokens"), &self.tokens);
        f(&join(prefix, "embedding.positions"), &self.positions);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "embedding.tokens"), &mut self.tokens);
        f(&join(prefix, "embedding.positions"), &mut self.positions);
    }
}

/// Final layer norm and vocabulary projection.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl OutputHead {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_gamma: Tensor::full(&[cfg.hidden], 1.0).with_requires_grad(true),
            ln_beta: Tensor::zeros(&[cfg.hidden]).with_requires_grad(true),
            weight: Tensor::randn(&[cfg.hidden, cfg.vocab], cfg.init_std, rng).with_requires_grad(true),
            bias: Tensor::zeros(&[cfg.vocab]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> Result<Var> {
        let g = binder.bind(tape, "head.ln.gamma".into(), &self.ln_gamma);
        let b = binder.bind(tape, "head.ln.beta".into(), &self.ln_beta);
        let w = binder.bind(tape, "head.weight".into(), &self.weight);
        let bias = binder.bind(tape, "head.bias".into(), &self.bias);
        let x = tape.layer_norm(h, g, b, LN_EPS)?;
        block::affine(tape, x, w, bias)
    }
}

impl Parameterized for OutputHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "head.ln.gamma"), &self.ln_gamma);
        f(&join(prefix, "head.ln.beta"), &self.ln_beta);
        f(&join(prefix, "head.weight"), &self.weight);
        f(&join(prefix, "head.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "head.ln.gamma"), &mut self.ln_gamma);
        f(&join(prefix, "head.ln.beta"), &mut self.ln_beta);
        f(&join(prefix, "head.weight"), &mut self.weight);
        f(&join(prefix, "head.bias"), &mut self.bias);
    }
}

/// Visits a list of blocks under their global `blocks.{i}` names.
pub(crate) fn visit_blocks(blocks: &[Block], prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    for b in blocks {
        b.visit(&join(prefix, &b.path()), f);
    }
}

pub(crate) fn visit_blocks_mut(blocks: &mut [Block], prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    for b in blocks {
        let path = join(prefix, &b.path());
        b.visit_mut(&path, f);
    }
}

/// Activations recorded during a monolithic forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTaps<'a> {
    pub embedded: Var,
    pub block_outputs: &'a [Var],
    pub logits: Var,
}

/// The unsplit model: embedding, `N` blocks and the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmModel {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    pub head: OutputHead,
}

impl GlmModel {
    /// Seeded initialisation; the same config and seed give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Embedding::new(&config, &mut rng);
        let ffn = config.hidden * config.ffn_mult;
        let mut blocks: Vec<Block> = (0..config.n_blocks)
            .map(|i| Block::new(i, config.hidden, config.heads, ffn, config.init_std, &mut rng))
            .collect();
        let head = OutputHead::new(&config, &mut rng);
        if config.prefix_len > 0 {
            for b in &mut blocks {
                b.prefix = Some(PrefixKV::new(
                    config.prefix_encoder,
                    config.prefix_len,
                    config.hidden,
                    config.init_std,
                    &mut rng,
                ));
            }
        }
        Ok(Self {
            config,
            embedding,
            blocks,
            head,
        })
    }

    /// Records the full forward pass and returns every block output along
    /// with the logits (`L × B × V`).
    pub fn forward_recorded(&self, tape: &mut Tape, binder: &mut Binder, tokens: &TokenBatch) -> Result<(Var, Vec<Var>, Var)> {
        let embedded = self.embedding.forward(tape, binder, tokens)?;
        let mut h = embedded;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(tape, binder, h, true)?;
            outs.push(h);
        }
        let logits = self.head.forward(tape, binder, h)?;
        Ok((embedded, outs, logits))
    }

    /// Logits for one sequence, shaped `len(x) × V`.
    pub fn logits(&self, x: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (_, _, logits) = self.forward_recorded(&mut tape, &mut binder, &TokenBatch::single(x))?;
        tape.tensor(logits).reshape(vec![x.len(), self.config.vocab])
    }

    /// Forward + backward on one batch; gradients are added to the
    /// parameters' grad buffers. Returns the mean loss.
    pub fn accumulate_loss_grads(&mut self, tokens: &TokenBatch, targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (_, _, logits) = self.forward_recorded(&mut tape, &mut binder, tokens)?;
        let loss = tape.cross_entropy(logits, targets)?;
        let grads = tape.backward(loss)?;
        binder.accumulate(self, "", &grads)?;
        Ok(tape.value(loss)[0])
    }
}

impl Parameterized for GlmModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embedding.visit(prefix, f);
        visit_blocks(&self.blocks, prefix, f);
        self.head.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embedding.visit_mut(prefix, f);
        visit_blocks_mut(&mut self.blocks, prefix, f);
        self.head.visit_mut(prefix, f);
    }
}

fn is_prefix_param(name: &str) -> bool {
    name.contains(".prefix.")
}

/// Freezes every base weight of `module` and marks the prefix parameters
/// trainable. Returns the names of the trainable set.
pub fn freeze_base_train_prefix<P: Parameterized + ?Sized>(module: &mut P) -> Result<Vec<String>> {
    let mut trainable = Vec::new();
    module.visit_mut("", &mut |name, t| {
        let prefix = is_prefix_param(name);
        t.set_requires_grad(prefix);
        if prefix {
            trainable.push(name.to_string());
        }
    });
    if trainable.is_empty() {
        return Err(Error::Config("prefix tuning requested but prefix_len is 0".into()));
    }
    Ok(trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(prefix_len: usize) -> ModelConfig {
        ModelConfig {
            n_blocks: 3,
            hidden: 16,
            heads: 2,
            vocab: 11,
            max_seq_len: 8,
            prefix_len,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_blocks: 2,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            hidden: 30,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = GlmModel::new(small(0), 5).unwrap();
        let x = [1, 2, 3, 4, 5];
        let a = m.logits(&x).unwrap();
        assert_eq!(a.shape(), &[5, 11]);
        let b = GlmModel::new(small(0), 5).unwrap().logits(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_out_of_range_is_index_error() {
        let m = GlmModel::new(small(0), 5).unwrap();
        assert!(matches!(m.logits(&[1, 11]), Err(Error::Index { .. })));
        assert!(matches!(m.logits(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = GlmModel::new(small(2), 9).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 0, 7]).unwrap();
        let v = 11;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
    }

    #[test]
    fn token_batch_layout() {
        let tb = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(tb.ids, vec![1, 4, 2, 5, 3, 6]);
        assert_eq!(tb.sequence(1), vec![4, 5, 6]);
        assert!(TokenBatch::from_sequences(&[vec![1], vec![1, 2]]).is_err());
    }

    #[test]
    fn freeze_requires_prefix() {
        let mut m = GlmModel::new(small(0), 1).unwrap();
        assert!(matches!(freeze_base_train_prefix(&mut m), Err(Error::Config(_))));
        let cfg = small(3);
        let mut m = GlmModel::new(cfg.clone(), 1).unwrap();
        let names = freeze_base_train_prefix(&mut m).unwrap();
        assert_eq!(names.len(), 2 * cfg.n_blocks);
        assert_eq!(m.trainable_param_count(), cfg.prefix_param_count());
        assert_eq!(cfg.prefix_param_count(), 3 * 2 * 3 * 2 * 8);
    }
}
