use rayon::prelude::*;

use super::kernels::{self, dot};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Target id skipped by [`Tape::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    Full,
    /// The first `prefix_len` keys are always visible; the remaining keys are
    /// causally aligned with the queries.
    Causal { prefix_len: usize },
}

impl AttentionMask {
    #[inline]
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::Full => true,
            AttentionMask::Causal { prefix_len } => key < prefix_len || key - prefix_len <= query,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, rows: usize, k: usize, n: usize, parts: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Tanh(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<(Var, usize)>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, n_in: usize, start: usize, len: usize, inner: usize },
    ExpandBatch { x: Var, len: usize, batch: usize, width: usize },
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    lq: usize,
    lk: usize,
    batch: usize,
    width: usize,
    mask: AttentionMask,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of executed operations. Nodes are appended in
/// execution order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    /// Registers a tensor as a leaf, copying its data. The leaf requires
    /// grad iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("input", &shape, &[data.len()]));
        }
        Ok(self.push_raw(shape, data, Op::Leaf, requires_grad))
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var], name: &str) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.iter().all(|x| x.is_finite()) {
            let finite_inputs = inputs
                .iter()
                .all(|v| self.nodes[v.0].value.iter().all(|x| x.is_finite()));
            assert!(!finite_inputs, "{name} produced non-finite output from finite inputs");
        }
        self.push_raw(shape, value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b], "mul"))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), &[a], "scale")
    }

    /// `x[..., n] + b[n]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || n == 0 {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, b), &[x, b], "add_bias"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x], "sum")
    }

    /// Two-dimensional matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut value, m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, &[a, b], "matmul"))
    }

    /// `x[..., k] · w[k, n]` applied to every row of `x`. For `L × B × k`
    /// activations the rows are processed as `B` independent chunks, which
    /// may run concurrently.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = numel(sx) / k.max(1);
        let parts = if sx.len() == 3 { sx[1] } else { 1 };
        let value = kernels::linear_forward(self.value(x), self.value(w), rows, k, n, parts);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, value, Op::Linear { x, w, rows, k, n, parts }, &[x, w], "linear"))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("transpose", sx, &[0, 0]));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let src = self.value(x);
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                value[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], value, Op::Transpose { x, rows, cols }, &[x], "transpose"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x], "reshape"))
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, s, &[axis]));
        }
        Ok((numel(&s[..axis]), s[axis], numel(&s[axis + 1..])))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split("softmax", x, axis)?;
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] - max).exp();
                    value[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    value[idx(i)] /= total;
                }
            }
        }
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, outer, n, inner }, &[x], "softmax"))
    }

    /// Layer normalisation over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let width = *sx.last().unwrap_or(&0);
        if width == 0 || self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = Vec::with_capacity(self.value(x).len());
        let mut stats = Vec::new();
        for row in self.value(x).chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            value.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * rstd * g[j] + b[j]));
        }
        Ok(self.push(
            sx.to_vec(),
            value,
            Op::LayerNorm { x, gamma, beta, stats },
            &[x, gamma, beta],
            "layer_norm",
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), &[x], "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), value, Op::Tanh(x), &[x], "tanh")
    }

    /// Gathers rows of `table[V, d]`; the result has shape `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || numel(index_shape) != ids.len() {
            return Err(Error::shape("embedding", st, index_shape));
        }
        let (vocab, width) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: vocab,
            });
        }
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            value.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        Ok(self.push(
            shape,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            parts.push((v, s[axis]));
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, n) in &parts {
                let src = self.value(v);
                value.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, value, Op::Concat { inputs: parts, outer, inner }, inputs, "concat"))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, n_in, inner) = self.axis_split("slice", x, axis)?;
        if start + len > n_in {
            return Err(Error::Index {
                what: "slice end",
                index: start + len,
                bound: n_in,
            });
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n_in + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        Ok(self.push(
            shape,
            value,
            Op::Slice {
                x,
                outer,
                n_in,
                start,
                len,
                inner,
            },
            &[x],
            "slice",
        ))
    }

    /// Repeats `x[L, d]` across a new batch axis giving `[L, B, d]`.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::shape("expand_batch", sx, &[0, 0]));
        }
        let (len, width) = (sx[0], sx[1]);
        let src = self.value(x);
        let mut value = Vec::with_capacity(len * batch * width);
        for l in 0..len {
            for _ in 0..batch {
                value.extend_from_slice(&src[l * width..(l + 1) * width]);
            }
        }
        Ok(self.push(
            vec![len, batch, width],
            value,
            Op::ExpandBatch { x, len, batch, width },
            &[x],
            "expand_batch",
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Lq × B × d`; `k` and `v` are `Lk × B × d` with heads packed
    /// along `d`. Returns `Lq × B × d` = per head `softmax(Q Kᵀ / √d_h) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3 || sk.len() != 3 || self.shape(v) != sk.as_slice() || sq[1] != sk[1] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (lq, batch, width) = (sq[0], sq[1], sq[2]);
        let lk = sk[0];
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("hidden width {width} not divisible by {heads} heads")));
        }
        if let AttentionMask::Causal { prefix_len } = mask {
            if prefix_len + lq != lk {
                return Err(Error::shape("attention (causal)", &sq, &sk));
            }
        }
        let geom = AttnGeom {
            heads,
            lq,
            lk,
            batch,
            width,
            mask,
        };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let per_batch: Vec<(Vec<f64>, Vec<f64>)> = if batch > 1 {
            (0..batch)
                .into_par_iter()
                .map(|b| geom.forward_one(qv, kv, vv, b))
                .collect()
        } else {
            (0..batch).map(|b| geom.forward_one(qv, kv, vv, b)).collect()
        };
        let mut value = vec![0.0; lq * batch * width];
        let mut probs = Vec::with_capacity(batch * heads * lq * lk);
        for (b, (out, p)) in per_batch.into_iter().enumerate() {
            for i in 0..lq {
                let dst = (i * batch + b) * width;
                value[dst..dst + width].copy_from_slice(&out[i * width..(i + 1) * width]);
            }
            probs.extend(p);
        }
        Ok(self.push(
            sq,
            value,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                lq,
                lk,
                batch,
                width,
                mask,
                probs,
            })),
            &[q, k, v],
            "attention",
        ))
    }

    /// Mean token-level negative log-likelihood over positions whose target
    /// is not [`IGNORE_INDEX`]. `logits` is `[..., V]`, one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        let vocab = *sl.last().unwrap_or(&0);
        if vocab == 0 || numel(sl) / vocab != targets.len() {
            return Err(Error::shape("cross_entropy", sl, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= vocab) {
            return Err(Error::Index {
                what: "target vocabulary",
                index: bad,
                bound: vocab,
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, row) in src.chunks(vocab).enumerate() {
            let t = targets[r];
            if t == IGNORE_INDEX {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            count += 1;
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    /// Used at the split boundaries where the downstream gradient arrives
    /// as a message.
    pub fn backward_from(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let n = &self.nodes[out.0];
        if seed.len() != n.value.len() {
            return Err(Error::shape("backward seed", &n.shape, &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        if !n.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(vb) {
                        *dv += gv * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(va) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |d| axpy(d, g, *c)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                let n = self.shape(*b)[0];
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| kernels::matmul_nt_acc(g, vb, d, *m, *n, *k));
                self.acc(grads, *b, |d| kernels::matmul_tn_acc(va, g, d, *m, *k, *n));
            }
            Op::Linear { x, w, rows, k, n, parts } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |d| kernels::linear_backward_input(g, vw, d, *rows, *k, *n, *parts));
                self.acc(grads, *w, |d| kernels::linear_backward_weight(vx, g, d, *rows, *k, *n, *parts));
            }
            Op::Transpose { x, rows, cols } => self.acc(grads, *x, |d| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Softmax { x, outer, n, inner } => {
                let y = &node.value;
                self.acc(grads, *x, |d| {
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let s: f64 = (0..*n).map(|t| y[idx(t)] * g[idx(t)]).sum();
                            for t in 0..*n {
                                d[idx(t)] += y[idx(t)] * (g[idx(t)] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let width = self.shape(*gamma)[0];
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let xhat = |r: usize, j: usize| (vx[r * width + j] - stats[r].0) * stats[r].1;
                self.acc(grads, *gamma, |d| {
                    for r in 0..stats.len() {
                        for j in 0..width {
                            d[j] += g[r * width + j] * xhat(r, j);
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for row in g.chunks(width) {
                        axpy(d, row, 1.0);
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dxhat = vec![0.0; width];
                    for r in 0..stats.len() {
                        let rstd = stats[r].1;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..width {
                            dxhat[j] = g[r * width + j] * vg[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat(r, j);
                        }
                        mean_d /= width as f64;
                        mean_dx /= width as f64;
                        for j in 0..width {
                            d[r * width + j] += rstd * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), &v) in d.iter_mut().zip(g).zip(vx) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *dv += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let width = self.shape(*table)[1];
                self.acc(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * width..(id + 1) * width], &g[r * width..(r + 1) * width], 1.0);
                    }
                });
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inputs.iter().map(|(_, n)| n).sum();
                let mut offset = 0;
                for &(v, n) in inputs {
                    self.acc(grads, v, |d| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            axpy(&mut d[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner], 1.0);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice {
                x,
                outer,
                n_in,
                start,
                len,
                inner,
            } => self.acc(grads, *x, |d| {
                for o in 0..*outer {
                    let dst = (o * n_in + start) * inner;
                    axpy(&mut d[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            }),
            Op::ExpandBatch { x, len, batch, width } => self.acc(grads, *x, |d| {
                for l in 0..*len {
                    for b in 0..*batch {
                        let src = (l * batch + b) * width;
                        axpy(&mut d[l * width..(l + 1) * width], &g[src..src + width], 1.0);
                    }
                }
            }),
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *count as f64;
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &mut d[r * vocab..(r + 1) * vocab];
                        for (dv, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *dv += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let geom = AttnGeom {
            heads: s.heads,
            lq: s.lq,
            lk: s.lk,
            batch: s.batch,
            width: s.width,
            mask: s.mask,
        };
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let run = |b: usize| geom.backward_one(qv, kv, vv, &s.probs, g, b);
        let per_batch: Vec<[Vec<f64>; 3]> = if s.batch > 1 {
            (0..s.batch).into_par_iter().map(run).collect()
        } else {
            (0..s.batch).map(run).collect()
        };
        let width = s.width;
        let scatter = |d: &mut [f64], which: usize, len: usize| {
            for (b, parts) in per_batch.iter().enumerate() {
                let src = &parts[which];
                for i in 0..len {
                    let dst = (i * s.batch + b) * width;
                    axpy(&mut d[dst..dst + width], &src[i * width..(i + 1) * width], 1.0);
                }
            }
        };
        self.acc(grads, s.q, |d| scatter(d, 0, s.lq));
        self.acc(grads, s.k, |d| scatter(d, 1, s.lk));
        self.acc(grads, s.v, |d| scatter(d, 2, s.lk));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

#[derive(Clone, Copy)]
struct AttnGeom {
    heads: usize,
    lq: usize,
    lk: usize,
    batch: usize,
    width: usize,
    mask: AttentionMask,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    #[inline]
    fn at(&self, pos: usize, b: usize, h: usize) -> usize {
        (pos * self.batch + b) * self.width + h * self.head_dim()
    }

    /// Returns (output `[lq × d]`, probabilities `[H × lq × lk]`) for one
    /// batch element.
    fn forward_one(&self, q: &[f64], k: &[f64], v: &[f64], b: usize) -> (Vec<f64>, Vec<f64>) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; self.lq * self.width];
        let mut probs = vec![0.0; self.heads * self.lq * self.lk];
        for h in 0..self.heads {
            for i in 0..self.lq {
                let qi = &q[self.at(i, b, h)..self.at(i, b, h) + dh];
                let row = &mut probs[(h * self.lq + i) * self.lk..(h * self.lq + i + 1) * self.lk];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in row.iter_mut().enumerate() {
                    if self.mask.allows(i, j) {
                        let kj = &k[self.at(j, b, h)..self.at(j, b, h) + dh];
                        *p = dot(qi, kj) * scale;
                        max = max.max(*p);
                    }
                }
                let mut total = 0.0;
                for (j, p) in row.iter_mut().enumerate() {
                    if self.mask.allows(i, j) {
                        *p = (*p - max).exp();
                        total += *p;
                    } else {
                        *p = 0.0;
                    }
                }
                let o = &mut out[i * self.width + h * dh..i * self.width + (h + 1) * dh];
                for (j, p) in row.iter_mut().enumerate() {
                    *p /= total;
                    if *p != 0.0 {
                        let vj = &v[self.at(j, b, h)..self.at(j, b, h) + dh];
                        axpy(o, vj, *p);
                    }
                }
            }
        }
        (out, probs)
    }

    /// Returns (dq `[lq × d]`, dk `[lk × d]`, dv `[lk × d]`) for one batch
    /// element.
    fn backward_one(&self, q: &[f64], k: &[f64], v: &[f64], probs: &[f64], g: &[f64], b: usize) -> [Vec<f64>; 3] {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; self.lq * self.width];
        let mut dk = vec![0.0; self.lk * self.width];
        let mut dv = vec![0.0; self.lk * self.width];
        let mut dp = vec![0.0; self.lk];
        let base = b * self.heads * self.lq * self.lk;
        for h in 0..self.heads {
            for i in 0..self.lq {
                let p = &probs[base + (h * self.lq + i) * self.lk..base + (h * self.lq + i + 1) * self.lk];
                let gi = &g[self.at(i, b, h)..self.at(i, b, h) + dh];
                let mut s = 0.0;
                for j in 0..self.lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v[self.at(j, b, h)..self.at(j, b, h) + dh];
                    dp[j] = dot(gi, vj);
                    s += p[j] * dp[j];
                    axpy(&mut dv[j * self.width + h * dh..j * self.width + (h + 1) * dh], gi, p[j]);
                }
                let qi = &q[self.at(i, b, h)..self.at(i, b, h) + dh];
                for j in 0..self.lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - s) * scale;
                    let kj = &k[self.at(j, b, h)..self.at(j, b, h) + dh];
                    axpy(&mut dq[i * self.width + h * dh..i * self.width + (h + 1) * dh], kj, ds);
                    axpy(&mut dk[j * self.width + h * dh..j * self.width + (h + 1) * dh], qi, ds);
                }
            }
        }
        [dq, dk, dv]
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let m = t(&[2, 3], &[1.5, -2.0, 0.25, 4.0, 5.0, -6.0]);
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.leaf(&Tensor::zeros(&[2, 2]));
        let mv = tape.leaf(&m);
        let r = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(r), m.data());
        let z = tape.matmul(zero, mv).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { lhs, rhs, .. } if lhs == vec![2, 3] && rhs == vec![2, 3]));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let big = tape.leaf(&t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let x = tape.leaf(&t(&[3], &[0.0, 2f64.ln(), 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, w) in tape.value(s).iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for j in 0..3 {
            assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        // huge margin, correct class
        let logits = tape.leaf(&t(&[2, 3], &[100.0, 0.0, 0.0, 0.0, 0.0, 100.0]));
        let l = tape.cross_entropy(logits, &[0, 2]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);

        let v = 7;
        let uniform = tape.leaf(&Tensor::full(&[3, v], 0.3));
        let l = tape.cross_entropy(uniform, &[1, 6, IGNORE_INDEX]).unwrap();
        assert!((tape.value(l)[0] - (v as f64).ln()).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(uniform, &[0, v, 1]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let sq = tape.mul(w, w).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_constants() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let y = tape.mul(w, c).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let b = tape.leaf(&t(&[2, 1, 3], &[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let a2 = tape.slice(c, 1, 0, 2).unwrap();
        let b2 = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = AttentionMask::Causal { prefix_len: 2 };
        assert!(m.allows(0, 0) && m.allows(0, 1) && m.allows(0, 2));
        assert!(!m.allows(0, 3));
        assert!(m.allows(3, 5));
        assert!(AttentionMask::Full.allows(0, 9));
    }

    #[test]
    fn empty_tape_backward_is_contract_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward_from(Var(0), &[1.0]), Err(Error::Contract(_))));
    }
}
