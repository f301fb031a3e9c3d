//! Three-way partition of the model: client front (embedding + block 0),
//! server body (blocks 1..N-2) and client tail (block N-1 + head). Each part
//! records its own tape; only boundary tensors cross between them.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{visit_blocks, visit_blocks_mut, Block, Embedding, GlmModel, ModelConfig, OutputHead, TokenBatch};
use crate::params::{accumulate_grads, Binder, GradMap, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

/// Block ranges owned by each party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub front: Range<usize>,
    pub body: Range<usize>,
    pub tail: Range<usize>,
}

impl SplitPlan {
    /// Front `{0}`, body `{1..N-2}`, tail `{N-1}`.
    pub fn standard(n_blocks: usize) -> Result<Self> {
        if n_blocks < 3 {
            return Err(Error::Config(format!(
                "a standard split needs at least 3 blocks, model has {n_blocks}"
            )));
        }
        Ok(Self {
            front: 0..1,
            body: 1..n_blocks - 1,
            tail: n_blocks - 1..n_blocks,
        })
    }

    /// Front owns only the embedding. Used by the attack harness to model the
    /// weaker cut; not accepted by the training orchestrator.
    pub(crate) fn embedding_only(n_blocks: usize) -> Result<Self> {
        if n_blocks < 2 {
            return Err(Error::Config("embedding-only split needs at least 2 blocks".into()));
        }
        Ok(Self {
            front: 0..0,
            body: 0..n_blocks - 1,
            tail: n_blocks - 1..n_blocks,
        })
    }

    fn validate(&self, n_blocks: usize) -> Result<()> {
        let ok = self.front.start == 0
            && self.front.end == self.body.start
            && self.body.end == self.tail.start
            && self.tail.end == n_blocks
            && !self.body.is_empty()
            && !self.tail.is_empty();
        if !ok {
            return Err(Error::Config(format!("split plan {self:?} does not cover 0..{n_blocks}")));
        }
        Ok(())
    }
}

struct Recorded {
    tape: Tape,
    binder: Binder,
    input: Option<Var>,
    output: Var,
}

fn run_blocks(tape: &mut Tape, binder: &mut Binder, blocks: &[Block], mut h: Var) -> Result<Var> {
    for b in blocks {
        h = b.forward(tape, binder, h, true)?;
    }
    Ok(h)
}

fn stale(client_id: u32, round: u64) -> Error {
    Error::StaleRound { client_id, round }
}

/// Embedding plus the first block(s), held by a client.
#[derive(Debug)]
pub struct ClientFront {
    pub config: ModelConfig,
    pub client_id: u32,
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    cache: Option<(u64, Recorded)>,
}

impl std::fmt::Debug for Recorded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recorded").field("nodes", &self.tape.len()).finish()
    }
}

impl Clone for ClientFront {
    /// Clones parameters only; any pending activation cache is dropped.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            client_id: self.client_id,
            embedding: self.embedding.clone(),
            blocks: self.blocks.clone(),
            cache: None,
        }
    }
}

impl ClientFront {
    fn record(&self, tokens: &TokenBatch) -> Result<Recorded> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let e = self.embedding.forward(&mut tape, &mut binder, tokens)?;
        let output = run_blocks(&mut tape, &mut binder, &self.blocks, e)?;
        Ok(Recorded {
            tape,
            binder,
            input: None,
            output,
        })
    }

    /// Smashed data `h0` (`L × B × d`). The tape is kept for [`Self::backward`];
    /// a pending cache from an earlier round is discarded.
    pub fn forward(&mut self, tokens: &TokenBatch, round: u64) -> Result<Tensor> {
        let rec = self.record(tokens)?;
        let out = rec.tape.tensor(rec.output);
        self.cache = Some((round, rec));
        Ok(out)
    }

    /// Forward without keeping the tape.
    pub fn infer(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let rec = self.record(tokens)?;
        Ok(rec.tape.tensor(rec.output))
    }

    /// Adds parameter gradients for `round` given `∂loss/∂h0`.
    pub fn backward(&mut self, round: u64, grad_h0: &Tensor) -> Result<()> {
        let rec = match self.cache.take() {
            Some((r, rec)) if r == round => rec,
            other => {
                self.cache = other;
                return Err(stale(self.client_id, round));
            }
        };
        check_grad_shape("front backward", &rec, grad_h0)?;
        let grads = rec.tape.backward_from(rec.output, grad_h0.data())?;
        rec.binder.accumulate(self, "", &grads)
    }
}

impl Parameterized for ClientFront {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embedding.visit(prefix, f);
        visit_blocks(&self.blocks, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embedding.visit_mut(prefix, f);
        visit_blocks_mut(&mut self.blocks, prefix, f);
    }
}

fn check_grad_shape(op: &'static str, rec: &Recorded, grad: &Tensor) -> Result<()> {
    let want = rec.tape.shape(rec.output);
    if want != grad.shape() {
        return Err(Error::shape(op, want, grad.shape()));
    }
    Ok(())
}

/// One cached body pass covering one or more `(client_id, round)` keys
/// stacked along the batch axis.
struct BodyEntry {
    keys: Vec<(u32, u64)>,
    sizes: Vec<usize>,
    rec: Recorded,
}

/// Middle blocks held by the server. Forward and backward take `&self` so
/// passes for different keys may run concurrently; only the cache map is
/// locked.
pub struct ServerBody {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    cache: Mutex<HashMap<u64, BodyEntry>>,
    next_entry: std::sync::atomic::AtomicU64,
}

impl std::fmt::Debug for ServerBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerBody")
            .field("blocks", &self.blocks.len())
            .field("pending", &self.pending())
            .finish()
    }
}

impl Clone for ServerBody {
    /// Clones parameters only; pending caches are dropped.
    fn clone(&self) -> Self {
        Self::new(self.config.clone(), self.blocks.clone())
    }
}

impl PartialEq for ServerBody {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.blocks == other.blocks
    }
}

impl ServerBody {
    fn new(config: ModelConfig, blocks: Vec<Block>) -> Self {
        Self {
            config,
            blocks,
            cache: Mutex::new(HashMap::new()),
            next_entry: Default::default(),
        }
    }

    /// Number of cached passes awaiting backward.
    pub fn pending(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn clear_cache(&self) {
        self.cache.lock().expect("cache lock").clear();
    }

    fn check_input(&self, h: &Tensor) -> Result<()> {
        let s = h.shape();
        if s.len() != 3 || s[2] != self.config.hidden || s[0] == 0 || s[0] > self.config.max_seq_len {
            return Err(Error::Protocol(format!(
                "smashed data shape {s:?} does not fit hidden size {} and max length {}",
                self.config.hidden, self.config.max_seq_len
            )));
        }
        Ok(())
    }

    fn record(&self, h: &Tensor) -> Result<Recorded> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let input = tape.leaf(&h.clone().with_requires_grad(true));
        let output = run_blocks(&mut tape, &mut binder, &self.blocks, input)?;
        Ok(Recorded {
            tape,
            binder,
            input: Some(input),
            output,
        })
    }

    /// Forward without caching.
    pub fn infer(&self, h0: &Tensor) -> Result<Tensor> {
        self.check_input(h0)?;
        let rec = self.record(h0)?;
        Ok(rec.tape.tensor(rec.output))
    }

    pub fn forward(&self, client_id: u32, round: u64, h0: &Tensor) -> Result<Tensor> {
        let mut out = self.forward_stacked(&[(client_id, round, h0.clone())])?;
        Ok(out.remove(0))
    }

    /// Stacks every input along the batch axis, runs one pass and returns
    /// the per-key output slices in input order.
    pub fn forward_stacked(&self, inputs: &[(u32, u64, Tensor)]) -> Result<Vec<Tensor>> {
        if inputs.is_empty() {
            return Err(Error::Contract("body forward with no inputs".into()));
        }
        let keys: Vec<(u32, u64)> = inputs.iter().map(|(c, r, _)| (*c, *r)).collect();
        for (i, k) in keys.iter().enumerate() {
            if keys[..i].contains(k) {
                return Err(Error::Protocol(format!("client {} appears twice in one stacked round", k.0)));
            }
        }
        for (_, _, h) in inputs {
            self.check_input(h)?;
        }
        {
            let cache = self.cache.lock().expect("cache lock");
            if let Some(k) = keys.iter().find(|k| cache.values().any(|e| e.keys.contains(k))) {
                return Err(Error::Protocol(format!(
                    "client {} round {} already has a pending body pass",
                    k.0, k.1
                )));
            }
        }
        let sizes: Vec<usize> = inputs.iter().map(|(_, _, h)| h.shape()[1]).collect();
        let parts: Vec<Tensor> = inputs.iter().map(|(_, _, h)| h.clone()).collect();
        let stacked = if parts.len() == 1 {
            parts.into_iter().next().expect("one input")
        } else {
            Tensor::stack_batch(&parts)?
        };
        let rec = self.record(&stacked)?;
        let outs = rec.tape.tensor(rec.output).split_batch(&sizes)?;
        let id = self.next_entry.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(id, BodyEntry { keys, sizes, rec });
        Ok(outs)
    }

    /// Backward for a solo pass. Returns `∂loss/∂h0` and the body's
    /// parameter gradients; apply them with [`Self::apply_grads`].
    pub fn backward(&self, client_id: u32, round: u64, grad: &Tensor) -> Result<(Tensor, GradMap)> {
        let (mut g, map) = self.backward_stacked(&[(client_id, round, grad.clone())])?;
        Ok((g.remove(0), map))
    }

    /// Backward for a stacked pass. `grads` must name keys from exactly one
    /// cached pass; keys of that pass that are absent (stragglers) contribute
    /// a zero gradient. Output is in the order of `grads`. The cache entry is
    /// consumed.
    pub fn backward_stacked(&self, grads: &[(u32, u64, Tensor)]) -> Result<(Vec<Tensor>, GradMap)> {
        let (first_c, first_r) = match grads.first() {
            Some((c, r, _)) => (*c, *r),
            None => return Err(Error::Contract("body backward with no gradients".into())),
        };
        let entry = {
            let mut cache = self.cache.lock().expect("cache lock");
            let id = cache
                .iter()
                .find(|(_, e)| e.keys.contains(&(first_c, first_r)))
                .map(|(id, _)| *id)
                .ok_or_else(|| stale(first_c, first_r))?;
            let e = &cache[&id];
            if let Some((c, r, _)) = grads.iter().find(|(c, r, _)| !e.keys.contains(&(*c, *r))) {
                return Err(stale(*c, *r));
            }
            cache.remove(&id).expect("entry present")
        };
        let width = self.config.hidden;
        let out_shape = entry.rec.tape.shape(entry.rec.output).to_vec();
        let len = out_shape[0];
        let mut parts = Vec::with_capacity(entry.keys.len());
        for (k, &size) in entry.keys.iter().zip(&entry.sizes) {
            let given = grads.iter().find(|(c, r, _)| (*c, *r) == *k);
            let part = match given {
                Some((_, _, g)) => {
                    if g.shape() != [len, size, width] {
                        return Err(Error::shape("body backward", &[len, size, width], g.shape()));
                    }
                    g.clone()
                }
                None => Tensor::zeros(&[len, size, width]),
            };
            parts.push(part);
        }
        let seed = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            Tensor::stack_batch(&parts)?
        };
        let g = entry.rec.tape.backward_from(entry.rec.output, seed.data())?;
        let input = entry.rec.input.expect("body records its input");
        let gin = Tensor::new(
            entry.rec.tape.shape(input).to_vec(),
            g.get(input).map_or_else(|| vec![0.0; seed.numel()], <[f64]>::to_vec),
        )?;
        let per_key = gin.split_batch(&entry.sizes)?;
        let out = grads
            .iter()
            .map(|(c, r, _)| {
                let i = entry.keys.iter().position(|k| *k == (*c, *r)).expect("validated key");
                per_key[i].clone()
            })
            .collect();
        Ok((out, entry.rec.binder.collect(&g)))
    }

    pub fn apply_grads(&mut self, grads: &GradMap) -> Result<()> {
        accumulate_grads(self, grads)
    }
}

impl Parameterized for ServerBody {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_blocks(&self.blocks, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_blocks_mut(&mut self.blocks, prefix, f);
    }
}

/// Last block plus output head, held by the client together with the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTail {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
    pub head: OutputHead,
}

impl ClientTail {
    fn record(&self, h: &Tensor, requires_grad: bool) -> Result<(Tape, Binder, Var, Var)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let input = tape.leaf(&h.clone().with_requires_grad(requires_grad));
        let x = run_blocks(&mut tape, &mut binder, &self.blocks, input)?;
        let logits = self.head.forward(&mut tape, &mut binder, x)?;
        Ok((tape, binder, input, logits))
    }

    /// Logits `L × B × V` for a body output.
    pub fn logits(&self, h_last: &Tensor) -> Result<Tensor> {
        let (tape, _, _, logits) = self.record(h_last, false)?;
        Ok(tape.tensor(logits))
    }

    /// Mean cross-entropy against position-major `targets`, adding parameter
    /// gradients into the tail and returning `(loss, ∂loss/∂h_last)`.
    pub fn forward_loss(&mut self, h_last: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
        let (mut tape, binder, input, logits) = self.record(h_last, true)?;
        let loss = tape.cross_entropy(logits, targets)?;
        let grads = tape.backward(loss)?;
        binder.accumulate(self, "", &grads)?;
        let g = grads.get(input).map_or_else(|| vec![0.0; h_last.numel()], <[f64]>::to_vec);
        Ok((tape.value(loss)[0], Tensor::new(h_last.shape().to_vec(), g)?))
    }
}

impl Parameterized for ClientTail {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_blocks(&self.blocks, prefix, f);
        self.head.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_blocks_mut(&mut self.blocks, prefix, f);
        self.head.visit_mut(prefix, f);
    }
}

/// The client's two parts; averaged together between clients.
#[derive(Debug, Clone)]
pub struct ClientParts {
    pub front: ClientFront,
    pub tail: ClientTail,
}

impl Parameterized for ClientParts {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.front.visit(prefix, f);
        self.tail.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.front.visit_mut(prefix, f);
        self.tail.visit_mut(prefix, f);
    }
}

/// Moves the model's parameters into the three parts.
pub fn split(model: GlmModel, plan: &SplitPlan) -> Result<(ClientFront, ServerBody, ClientTail)> {
    plan.validate(model.config.n_blocks)?;
    let GlmModel {
        config,
        embedding,
        mut blocks,
        head,
    } = model;
    let tail_blocks = blocks.split_off(plan.tail.start);
    let body_blocks = blocks.split_off(plan.body.start);
    let front = ClientFront {
        config: config.clone(),
        client_id: 0,
        embedding,
        blocks,
        cache: None,
    };
    let body = ServerBody::new(config.clone(), body_blocks);
    let tail = ClientTail {
        config,
        blocks: tail_blocks,
        head,
    };
    Ok((front, body, tail))
}

/// Inverse of [`split`].
pub fn reassemble(front: ClientFront, body: ServerBody, tail: ClientTail) -> Result<GlmModel> {
    let config = front.config.clone();
    if body.config != config || tail.config != config {
        return Err(Error::Config("parts come from models with different configs".into()));
    }
    let mut blocks = front.blocks;
    blocks.extend(body.blocks);
    blocks.extend(tail.blocks);
    if blocks.len() != config.n_blocks || blocks.iter().enumerate().any(|(i, b)| b.index != i) {
        return Err(Error::Config("parts do not cover every block exactly once".into()));
    }
    Ok(GlmModel {
        config,
        embedding: front.embedding,
        blocks,
        head: tail.head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> ModelConfig {
        ModelConfig {
            n_blocks: n,
            hidden: 8,
            heads: 2,
            vocab: 17,
            max_seq_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn plan_arithmetic() {
        let p = SplitPlan::standard(4).unwrap();
        assert_eq!((p.front, p.body, p.tail), (0..1, 1..3, 3..4));
        let p = SplitPlan::standard(28).unwrap();
        assert_eq!((p.body.start, p.body.end - 1), (1, 26));
        assert!(matches!(SplitPlan::standard(2), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip() {
        let m = GlmModel::new(cfg(4), 3).unwrap();
        let (f, b, t) = split(m.clone(), &SplitPlan::standard(4).unwrap()).unwrap();
        assert_eq!(f.blocks.len() + b.blocks.len() + t.blocks.len(), 4);
        assert_eq!(reassemble(f, b, t).unwrap(), m);
    }

    #[test]
    fn double_backward_is_stale() {
        let m = GlmModel::new(cfg(3), 3).unwrap();
        let (mut f, b, mut t) = split(m, &SplitPlan::standard(3).unwrap()).unwrap();
        let x = TokenBatch::single(&[1, 2, 3]);
        let h0 = f.forward(&x, 1).unwrap();
        let h = b.forward(7, 1, &h0).unwrap();
        let (_, g) = t.forward_loss(&h, &[2, 3, 4]).unwrap();
        let (g0, _) = b.backward(7, 1, &g).unwrap();
        assert!(matches!(b.backward(7, 1, &g), Err(Error::StaleRound { client_id: 7, round: 1 })));
        assert!(matches!(f.backward(2, &g0), Err(Error::StaleRound { .. })));
        f.backward(1, &g0).unwrap();
        assert!(matches!(f.backward(1, &g0), Err(Error::StaleRound { .. })));
        assert!(matches!(b.forward(7, 2, &Tensor::zeros(&[3, 1, 5])), Err(Error::Protocol(_))));
    }
}
