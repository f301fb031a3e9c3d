use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Binder, Parameterized};
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// How trainable prefix key/value rows are produced for a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PrefixEncoderKind {
    /// The prefix tensors are the parameters themselves.
    #[default]
    Identity,
    /// A per-block two-layer tanh MLP maps a prefix embedding to key and value.
    Mlp { hidden: usize },
}

/// Per-block prefix parameters. Key and value are each `L_p × d` with the
/// heads packed along `d` (`d = N_h · d_h`), shared by every batch element.
#[derive(Debug, Clone, PartialEq)]
pub enum PrefixKV {
    Direct {
        key: Tensor,
        value: Tensor,
    },
    Encoded {
        embed: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

impl PrefixKV {
    pub fn new<R: Rng + ?Sized>(kind: PrefixEncoderKind, len: usize, width: usize, std: f64, rng: &mut R) -> Self {
        match kind {
            PrefixEncoderKind::Identity => PrefixKV::Direct {
                key: Tensor::randn(&[len, width], std, rng).with_requires_grad(true),
                value: Tensor::randn(&[len, width], std, rng).with_requires_grad(true),
            },
            PrefixEncoderKind::Mlp { hidden } => PrefixKV::Encoded {
                embed: Tensor::randn(&[len, width], std, rng).with_requires_grad(true),
                w1: Tensor::randn(&[width, hidden], std, rng).with_requires_grad(true),
                b1: Tensor::zeros(&[hidden]).with_requires_grad(true),
                w2: Tensor::randn(&[hidden, 2 * width], std, rng).with_requires_grad(true),
                b2: Tensor::zeros(&[2 * width]).with_requires_grad(true),
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PrefixKV::Direct { key, .. } => key.shape()[0],
            PrefixKV::Encoded { embed, .. } => embed.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records the prefix on the tape, returning `(key, value)` each `L_p × d`.
    fn materialize(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str) -> Result<(Var, Var)> {
        match self {
            PrefixKV::Direct { key, value } => Ok((
                binder.bind(tape, join(prefix, "key"), key),
                binder.bind(tape, join(prefix, "value"), value),
            )),
            PrefixKV::Encoded { embed, w1, b1, w2, b2 } => {
                let width = embed.shape()[1];
                let e = binder.bind(tape, join(prefix, "embed"), embed);
                let w1 = binder.bind(tape, join(prefix, "w1"), w1);
                let b1 = binder.bind(tape, join(prefix, "b1"), b1);
                let w2 = binder.bind(tape, join(prefix, "w2"), w2);
                let b2 = binder.bind(tape, join(prefix, "b2"), b2);
                let h = tape.linear(e, w1)?;
                let h = tape.add_bias(h, b1)?;
                let h = tape.tanh(h);
                let kv = tape.linear(h, w2)?;
                let kv = tape.add_bias(kv, b2)?;
                Ok((tape.slice(kv, 1, 0, width)?, tape.slice(kv, 1, width, width)?))
            }
        }
    }
}

impl Parameterized for PrefixKV {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            PrefixKV::Direct { key, value } => {
                f(&join(prefix, "key"), key);
                f(&join(prefix, "value"), value);
            }
            PrefixKV::Encoded { embed, w1, b1, w2, b2 } => {
                f(&join(prefix, "embed"), embed);
                f(&join(prefix, "w1"), w1);
                f(&join(prefix, "b1"), b1);
                f(&join(prefix, "w2"), w2);
                f(&join(prefix, "b2"), b2);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            PrefixKV::Direct { key, value } => {
                f(&join(prefix, "key"), key);
                f(&join(prefix, "value"), value);
            }
            PrefixKV::Encoded { embed, w1, b1, w2, b2 } => {
                f(&join(prefix, "embed"), embed);
                f(&join(prefix, "w1"), w1);
                f(&join(prefix, "b1"), b1);
                f(&join(prefix, "w2"), w2);
                f(&join(prefix, "b2"), b2);
            }
        }
    }
}

/// Pre-norm transformer block: multi-head self-attention and a GELU FFN,
/// each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: usize,
    pub heads: usize,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub prefix: Option<PrefixKV>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(index: usize, width: usize, heads: usize, ffn: usize, std: f64, rng: &mut R) -> Self {
        let w = |shape: &[usize], rng: &mut R| Tensor::randn(shape, std, rng).with_requires_grad(true);
        let zeros = |n: usize| Tensor::zeros(&[n]).with_requires_grad(true);
        let ones = |n: usize| Tensor::full(&[n], 1.0).with_requires_grad(true);
        Self {
            index,
            heads,
            ln1_gamma: ones(width),
            ln1_beta: zeros(width),
            wq: w(&[width, width], rng),
            bq: zeros(width),
            wk: w(&[width, width], rng),
            bk: zeros(width),
            wv: w(&[width, width], rng),
            bv: zeros(width),
            wo: w(&[width, width], rng),
            bo: zeros(width),
            ln2_gamma: ones(width),
            ln2_beta: zeros(width),
            w1: w(&[width, ffn], rng),
            b1: zeros(ffn),
            w2: w(&[ffn, width], rng),
            b2: zeros(width),
            prefix: None,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn path(&self) -> String {
        format!("blocks.{}", self.index)
    }

    /// `h` is `L × B × d`. With a prefix the keys and values become
    /// `[prefix : key]`, `[prefix : value]` along the sequence axis.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var, causal: bool) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.width() {
            return Err(Error::shape("block input", &shape, &[0, 0, self.width()]));
        }
        let batch = shape[1];
        let p = self.path();
        let [g1, be1, wq, bq, wk, bk, wv, bv, wo, bo, g2, be2, w1, b1, w2, b2] =
            self.named().map(|(name, t)| binder.bind(tape, join(&p, name), t));

        let x = tape.layer_norm(h, g1, be1, LN_EPS)?;
        let q = affine(tape, x, wq, bq)?;
        let k = affine(tape, x, wk, bk)?;
        let v = affine(tape, x, wv, bv)?;

        let (k, v, prefix_len) = match &self.prefix {
            Some(prefix) if !prefix.is_empty() => {
                let (pk, pv) = prefix.materialize(tape, binder, &join(&p, "prefix"))?;
                if tape.shape(pk) != [prefix.len(), self.width()] {
                    return Err(Error::Config(format!(
                        "prefix shape {:?} does not match block width {}",
                        tape.shape(pk),
                        self.width()
                    )));
                }
                let pk = tape.expand_batch(pk, batch)?;
                let pv = tape.expand_batch(pv, batch)?;
                (tape.concat(&[pk, k], 0)?, tape.concat(&[pv, v], 0)?, prefix.len())
            }
            _ => (k, v, 0),
        };
        let mask = if causal {
            AttentionMask::Causal { prefix_len }
        } else {
            AttentionMask::Full
        };
        let a = tape.attention(q, k, v, self.heads, mask)?;
        let o = affine(tape, a, wo, bo)?;
        let h1 = tape.add(h, o)?;

        let x2 = tape.layer_norm(h1, g2, be2, LN_EPS)?;
        let f = affine(tape, x2, w1, b1)?;
        let f = tape.gelu(f);
        let f = affine(tape, f, w2, b2)?;
        tape.add(h1, f)
    }
}

pub(crate) fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.linear(x, w)?;
    tape.add_bias(y, b)
}

impl Parameterized for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.named() {
            f(&join(prefix, name), t);
        }
        if let Some(p) = &self.prefix {
            p.visit(&join(prefix, "prefix"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in self.named_mut() {
            f(&join(prefix, name), t);
        }
        if let Some(p) = &mut self.prefix {
            p.visit_mut(&join(prefix, "prefix"), f);
        }
    }
}

impl Block {
    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }
}
