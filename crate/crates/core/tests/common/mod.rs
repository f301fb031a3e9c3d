#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed_core::model::{Block, GlmModel, ModelConfig, PrefixEncoderKind, PrefixKV, TokenBatch};
use splitfed_core::split::{split, SplitPlan};
use splitfed_core::tensor::{gradcheck, Tape, Var};
use splitfed_core::{Binder, ParamSet, Parameterized, Tensor};

/// Relative L2 error between two vectors, 0 when both are effectively zero.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    gradcheck::relative(diff, norm)
}

pub fn grads_of<P: Parameterized>(p: &P) -> ParamSet {
    let mut out = ParamSet::default();
    p.visit("", &mut |name, t| {
        if let Some(g) = t.grad() {
            out.0.insert(name.to_string(), Tensor::new(t.shape().to_vec(), g.to_vec()).unwrap());
        }
    });
    out
}

#[derive(Debug)]
pub struct Equivalence {
    pub logits_max_abs: f64,
    pub h0_max_abs: f64,
    pub boundary_rel: f64,
    pub param_grad_rel: f64,
    pub params_checked: usize,
}

pub fn random_config(rng: &mut ChaCha8Rng, n_blocks: usize) -> ModelConfig {
    let heads = rng.gen_range(1..=3);
    ModelConfig {
        n_blocks,
        hidden: heads * rng.gen_range(2..=4),
        heads,
        vocab: rng.gen_range(5..=20),
        max_seq_len: 8,
        prefix_len: if rng.gen_bool(0.3) { rng.gen_range(1..=3) } else { 0 },
        ffn_mult: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Runs one training step through the split pipeline and through the
/// monolith, comparing logits, the body-input activation, the tail's
/// boundary gradient and every parameter gradient.
pub fn split_equivalence(seed: u64, n_blocks: usize) -> Equivalence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, n_blocks);
    let len = rng.gen_range(1..=cfg.max_seq_len);
    let batch = rng.gen_range(1..=2);
    let seqs: Vec<Vec<usize>> = (0..batch).map(|_| (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect()).collect();
    let tokens = TokenBatch::from_sequences(&seqs).unwrap();
    let targets: Vec<usize> = (0..len * batch).map(|_| rng.gen_range(0..cfg.vocab)).collect();

    let mut mono = GlmModel::new(cfg.clone(), seed).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let (_, outs, logits) = mono.forward_recorded(&mut tape, &mut binder, &tokens).unwrap();
    let loss = tape.cross_entropy(logits, &targets).unwrap();
    let g = tape.backward(loss).unwrap();
    binder.accumulate(&mut mono, "", &g).unwrap();
    let mono_logits = tape.tensor(logits);
    let mono_h0 = tape.tensor(outs[0]);
    let mono_boundary = g.get(outs[n_blocks - 2]).unwrap().to_vec();

    let model = GlmModel::new(cfg, seed).unwrap();
    let (mut front, mut body, mut tail) = split(model, &SplitPlan::standard(n_blocks).unwrap()).unwrap();
    let h0 = front.forward(&tokens, 1).unwrap();
    let h = body.forward(0, 1, &h0).unwrap();
    let split_logits = tail.logits(&h).unwrap();
    let (_, gb) = tail.forward_loss(&h, &targets).unwrap();
    let (g0, body_grads) = body.backward(0, 1, &gb).unwrap();
    body.apply_grads(&body_grads).unwrap();
    front.backward(1, &g0).unwrap();

    let mono_grads = grads_of(&mono);
    let mut split_grads = grads_of(&front);
    split_grads.0.extend(grads_of(&body).0);
    split_grads.0.extend(grads_of(&tail).0);
    assert_eq!(mono_grads.len(), split_grads.len(), "same parameters receive gradients");
    let mut worst: f64 = 0.0;
    for (name, t) in &mono_grads.0 {
        let s = split_grads.get(name).unwrap_or_else(|| panic!("missing grad for {name}"));
        worst = worst.max(rel(t.data(), s.data()));
    }
    Equivalence {
        logits_max_abs: mono_logits.max_abs_diff(&split_logits),
        h0_max_abs: mono_h0.max_abs_diff(&h0),
        boundary_rel: rel(&mono_boundary, gb.data()),
        param_grad_rel: worst,
        params_checked: mono_grads.len(),
    }
}

/// Per-client boundary gradients `∂loss/∂h0` from `m` solo passes and from
/// one stacked pass; returns the largest relative error.
pub fn client_batch_equivalence(seed: u64, m: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        n_blocks: 4,
        hidden: 16,
        heads: 4,
        vocab: 32,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    let len = 6;
    let data: Vec<(Vec<usize>, Vec<usize>)> = (0..m)
        .map(|_| {
            let x: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
            let y: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
            (x, y)
        })
        .collect();
    let model = GlmModel::new(cfg, seed).unwrap();
    let (front, body, tail) = split(model, &SplitPlan::standard(4).unwrap()).unwrap();

    let mut solo = Vec::new();
    let mut solo_body_grads = Vec::new();
    for (i, (x, y)) in data.iter().enumerate() {
        let (mut f, mut t) = (front.clone(), tail.clone());
        let h0 = f.forward(&TokenBatch::single(x), 1).unwrap();
        let h = body.forward(i as u32, 1, &h0).unwrap();
        let (_, g) = t.forward_loss(&h, y).unwrap();
        let (g0, bg) = body.backward(i as u32, 1, &g).unwrap();
        solo.push(g0);
        solo_body_grads.push(bg);
    }

    let mut inputs = Vec::new();
    let mut tails = Vec::new();
    for (i, (x, _)) in data.iter().enumerate() {
        let mut f = front.clone();
        inputs.push((i as u32, 2, f.forward(&TokenBatch::single(x), 2).unwrap()));
        tails.push(tail.clone());
    }
    let outs = body.forward_stacked(&inputs).unwrap();
    assert_eq!(body.pending(), 1);
    let mut ups = Vec::new();
    for (i, ((_, y), h)) in data.iter().zip(&outs).enumerate() {
        let (_, g) = tails[i].forward_loss(h, y).unwrap();
        ups.push((i as u32, 2, g));
    }
    let (stacked, stacked_body_grads) = body.backward_stacked(&ups).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in solo.iter().zip(&stacked) {
        assert_eq!(b.shape(), &[len, 1, 16]);
        worst = worst.max(rel(a.data(), b.data()));
    }
    // The stacked body gradient is the sum of the solo ones.
    for (name, g) in &stacked_body_grads {
        let sum: Vec<f64> = (0..g.len()).map(|j| solo_body_grads.iter().map(|s| s[name][j]).sum()).collect();
        worst = worst.max(rel(g, &sum));
    }
    worst
}

/// Sieve of Eratosthenes up to `n` exclusive.
pub fn sieve(n: usize) -> Vec<bool> {
    let mut p = vec![true; n];
    p[0] = false;
    if n > 1 {
        p[1] = false;
    }
    let mut i = 2;
    while i * i < n {
        if p[i] {
            let mut j = i * i;
            while j < n {
                p[j] = false;
                j += i;
            }
        }
        i += 1;
    }
    p
}

/// Trains prefix-only for `steps` Adam steps; returns (base delta, prefix
/// delta) as max absolute parameter change.
pub fn prefix_training_deltas(prefix_len: usize, steps: usize) -> (f64, f64) {
    use splitfed_core::model::freeze_base_train_prefix;
    use splitfed_core::tensor::{Adam, AdamConfig};
    let cfg = ModelConfig {
        n_blocks: 3,
        hidden: 16,
        heads: 2,
        vocab: 24,
        max_seq_len: 8,
        prefix_len,
        ..ModelConfig::default()
    };
    let mut m = GlmModel::new(cfg.clone(), 5).unwrap();
    let trained = freeze_base_train_prefix(&mut m).unwrap();
    assert_eq!(m.trainable_param_count(), cfg.prefix_param_count());
    let before = m.snapshot(false);
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..steps {
        let x: Vec<usize> = (0..8).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        m.accumulate_loss_grads(&TokenBatch::single(&x), &x).unwrap();
        opt.step(&mut m, 1.0);
    }
    let after = m.snapshot(false);
    let (mut base, mut prefix) = (0.0f64, 0.0f64);
    for (name, t) in &before.0 {
        let d = t.max_abs_diff(after.get(name).unwrap());
        if trained.contains(name) {
            prefix = prefix.max(d);
        } else {
            base = base.max(d);
        }
    }
    (base, prefix)
}

pub const FD_EPS: f64 = 1e-5;

fn block_objective(block: &Block, h: &Tensor, proj: &[f64]) -> (f64, Tape, Binder, Var, Var) {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let hv = tape.leaf(h);
    let out = block.forward(&mut tape, &mut binder, hv, true).unwrap();
    let p = tape.input(tape.shape(out).to_vec(), proj.to_vec(), false).unwrap();
    let m = tape.mul(out, p).unwrap();
    let loss = tape.sum(m);
    (tape.value(loss)[0], tape, binder, hv, loss)
}

/// Central differences over a full block's input and every parameter,
/// against the tape's gradients. Returns (name, rel err) per tensor.
pub fn block_gradcheck(seed: u64, prefix: Option<PrefixEncoderKind>) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let (d, heads, l, b) = (6, 2, 3, 2);
    let mut block = Block::new(0, d, heads, 8, 0.5, &mut rng);
    if let Some(kind) = prefix {
        block.prefix = Some(PrefixKV::new(kind, 2, d, 0.5, &mut rng));
    }
    let h = Tensor::randn(&[l, b, d], 1.0, &mut rng).with_requires_grad(true);
    let proj: Vec<f64> = (0..l * b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let (_, tape, binder, hv, loss) = block_objective(&block, &h, &proj);
    let grads = tape.backward(loss).unwrap();
    let mut analytic = block.clone();
    analytic.zero_grads();
    binder.accumulate(&mut analytic, "blocks.0", &grads).unwrap();

    let mut out = Vec::new();
    let mut h2 = h.clone();
    let mut num_h = vec![0.0; h.numel()];
    for j in 0..h.numel() {
        let o = h.data()[j];
        h2.data_mut()[j] = o + FD_EPS;
        let plus = block_objective(&block, &h2, &proj).0;
        h2.data_mut()[j] = o - FD_EPS;
        let minus = block_objective(&block, &h2, &proj).0;
        h2.data_mut()[j] = o;
        num_h[j] = (plus - minus) / (2.0 * FD_EPS);
    }
    out.push(("input".to_string(), rel(grads.get(hv).unwrap(), &num_h)));

    let mut names = Vec::new();
    block.visit("", &mut |n, _| names.push(n.to_string()));
    for name in names {
        let mut an = None;
        analytic.visit("", &mut |n, t| {
            if n == name {
                an = Some(t.grad().expect("grad populated").to_vec());
            }
        });
        let an = an.unwrap();
        let mut num = vec![0.0; an.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let f = |delta: f64| {
                let mut blk = block.clone();
                blk.visit_mut("", &mut |n, t| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
                block_objective(&blk, &h, &proj).0
            };
            *slot = (f(FD_EPS) - f(-FD_EPS)) / (2.0 * FD_EPS);
        }
        out.push((name, rel(&an, &num)));
    }
    out
}

/// Every differentiable tape op on shapes drawn from `seed`; returns the
/// worst relative error per op.
pub fn op_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    use splitfed_core::tensor::{AttentionMask, IGNORE_INDEX};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(1..5usize);
    let rnd = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);
    let e = FD_EPS;
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut push = |name, r: splitfed_core::Result<splitfed_core::tensor::GradCheck>| {
        out.push((name, r.map(|g| g.max_rel_err()).unwrap_or(f64::INFINITY)));
    };

    let s = [dim(&mut rng), dim(&mut rng)];
    let ins = [rnd(&s, &mut rng), rnd(&s, &mut rng)];
    push("add", gradcheck(&ins, e, seed, |t, v| t.add(v[0], v[1])));
    push("sub", gradcheck(&ins, e, seed, |t, v| t.sub(v[0], v[1])));
    push("mul", gradcheck(&ins, e, seed, |t, v| t.mul(v[0], v[1])));
    push("scale", gradcheck(&ins[..1], e, seed, |t, v| Ok(t.scale(v[0], -1.7))));
    push("sum", gradcheck(&ins[..1], e, seed, |t, v| Ok(t.sum(v[0]))));
    push("gelu", gradcheck(&ins[..1], e, seed, |t, v| Ok(t.gelu(v[0]))));
    push("tanh", gradcheck(&ins[..1], e, seed, |t, v| Ok(t.tanh(v[0]))));
    push("transpose", gradcheck(&ins[..1], e, seed, |t, v| t.transpose(v[0])));
    push("reshape", gradcheck(&ins[..1], e, seed, |t, v| t.reshape(v[0], &[s[0] * s[1]])));

    let (m, k, n, b) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let ins = [rnd(&[m, k], &mut rng), rnd(&[k, n], &mut rng)];
    push("matmul", gradcheck(&ins, e, seed, |t, v| t.matmul(v[0], v[1])));
    let ins = [rnd(&[m, b, k], &mut rng), rnd(&[k, n], &mut rng), rnd(&[n], &mut rng)];
    push(
        "linear+bias",
        gradcheck(&ins, e, seed, |t, v| {
            let y = t.linear(v[0], v[1])?;
            t.add_bias(y, v[2])
        }),
    );

    let s = [dim(&mut rng) + 1, dim(&mut rng) + 1, dim(&mut rng) + 1];
    let x = rnd(&s, &mut rng);
    for axis in 0..3 {
        push("softmax", gradcheck(std::slice::from_ref(&x), e, seed, |t, v| t.softmax(v[0], axis)));
    }
    let ins = [x, rnd(&[s[2]], &mut rng), rnd(&[s[2]], &mut rng)];
    push("layer_norm", gradcheck(&ins, e, seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)));

    let (vocab, d, l, b) = (dim(&mut rng) + 2, dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let ids: Vec<usize> = (0..l * b).map(|_| rng.gen_range(0..vocab)).collect();
    push(
        "embedding",
        gradcheck(&[rnd(&[vocab, d], &mut rng)], e, seed, |t, v| t.embedding(v[0], &ids, &[l, b])),
    );
    let ins = [rnd(&[l, b, d], &mut rng), rnd(&[l + 1, b, d], &mut rng)];
    push("concat", gradcheck(&ins, e, seed, |t, v| t.concat(&[v[0], v[1]], 0)));
    push("slice", gradcheck(&ins[1..], e, seed, |t, v| t.slice(v[0], 0, 1, l)));
    push(
        "expand_batch",
        gradcheck(&[rnd(&[l, d], &mut rng)], e, seed, |t, v| t.expand_batch(v[0], b)),
    );

    let heads = rng.gen_range(1..3);
    let d = heads * dim(&mut rng);
    let (lq, b, p) = (dim(&mut rng), dim(&mut rng), rng.gen_range(0..3));
    let ins = [rnd(&[lq, b, d], &mut rng), rnd(&[lq + p, b, d], &mut rng), rnd(&[lq + p, b, d], &mut rng)];
    for mask in [AttentionMask::Full, AttentionMask::Causal { prefix_len: p }] {
        push("attention", gradcheck(&ins, e, seed, |t, v| t.attention(v[0], v[1], v[2], heads, mask)));
    }

    let (rows, vocab) = (dim(&mut rng) + 1, dim(&mut rng) + 1);
    let mut targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
    targets[0] = IGNORE_INDEX;
    push(
        "cross_entropy",
        gradcheck(&[rnd(&[rows, vocab], &mut rng)], e, seed, |t, v| t.cross_entropy(v[0], &targets)),
    );
    out
}
