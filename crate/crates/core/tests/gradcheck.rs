mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed_core::model::PrefixEncoderKind;
use splitfed_core::tensor::{gradcheck, AttentionMask, Tape, Tensor, IGNORE_INDEX};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..5)
}

fn assert_ok(name: &str, r: splitfed_core::Result<splitfed_core::tensor::GradCheck>) {
    let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(r.max_rel_err() <= TOL, "{name}: rel err {:?}", r.rel_err);
}

#[test]
fn elementwise_ops() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [dim(&mut rng), dim(&mut rng)];
        let ins = [rnd(&s, &mut rng), rnd(&s, &mut rng)];
        assert_ok("add", gradcheck(&ins, EPS, seed, |t, v| t.add(v[0], v[1])));
        assert_ok("sub", gradcheck(&ins, EPS, seed, |t, v| t.sub(v[0], v[1])));
        assert_ok("mul", gradcheck(&ins, EPS, seed, |t, v| t.mul(v[0], v[1])));
        assert_ok("scale", gradcheck(&ins[..1], EPS, seed, |t, v| Ok(t.scale(v[0], -1.7))));
        assert_ok("sum", gradcheck(&ins[..1], EPS, seed, |t, v| Ok(t.sum(v[0]))));
        assert_ok("gelu", gradcheck(&ins[..1], EPS, seed, |t, v| Ok(t.gelu(v[0]))));
        assert_ok("tanh", gradcheck(&ins[..1], EPS, seed, |t, v| Ok(t.tanh(v[0]))));
        assert_ok("transpose", gradcheck(&ins[..1], EPS, seed, |t, v| t.transpose(v[0])));
        assert_ok(
            "reshape",
            gradcheck(&ins[..1], EPS, seed, |t, v| t.reshape(v[0], &[s[0] * s[1]])),
        );
    }
}

#[test]
fn matmul_linear_bias() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, k, n, b) = (dim(&mut rng), dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let ins = [rnd(&[m, k], &mut rng), rnd(&[k, n], &mut rng)];
        assert_ok("matmul", gradcheck(&ins, EPS, seed, |t, v| t.matmul(v[0], v[1])));
        let ins = [rnd(&[m, b, k], &mut rng), rnd(&[k, n], &mut rng), rnd(&[n], &mut rng)];
        assert_ok(
            "linear+bias",
            gradcheck(&ins, EPS, seed, |t, v| {
                let y = t.linear(v[0], v[1])?;
                t.add_bias(y, v[2])
            }),
        );
    }
}

#[test]
fn softmax_and_layer_norm() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let s = [dim(&mut rng) + 1, dim(&mut rng) + 1, dim(&mut rng) + 1];
        let x = rnd(&s, &mut rng);
        for axis in 0..3 {
            assert_ok("softmax", gradcheck(std::slice::from_ref(&x), EPS, seed, |t, v| t.softmax(v[0], axis)));
        }
        let ins = [x, rnd(&[s[2]], &mut rng), rnd(&[s[2]], &mut rng)];
        assert_ok(
            "layer_norm",
            gradcheck(&ins, EPS, seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        );
    }
}

#[test]
fn embedding_concat_slice_expand() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (vocab, d, l, b) = (dim(&mut rng) + 2, dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let ids: Vec<usize> = (0..l * b).map(|_| rng.gen_range(0..vocab)).collect();
        assert_ok(
            "embedding",
            gradcheck(&[rnd(&[vocab, d], &mut rng)], EPS, seed, |t, v| t.embedding(v[0], &ids, &[l, b])),
        );
        let ins = [rnd(&[l, b, d], &mut rng), rnd(&[l + 1, b, d], &mut rng)];
        assert_ok("concat0", gradcheck(&ins, EPS, seed, |t, v| t.concat(&[v[0], v[1]], 0)));
        let ins2 = [rnd(&[l, b, d], &mut rng), rnd(&[l, b, d + 2], &mut rng)];
        assert_ok("concat2", gradcheck(&ins2, EPS, seed, |t, v| t.concat(&[v[0], v[1]], 2)));
        assert_ok("slice", gradcheck(&ins[1..], EPS, seed, |t, v| t.slice(v[0], 0, 1, l)));
        assert_ok(
            "expand_batch",
            gradcheck(&[rnd(&[l, d], &mut rng)], EPS, seed, |t, v| t.expand_batch(v[0], b)),
        );
    }
}

#[test]
fn attention_all_masks() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let heads = rng.gen_range(1..3);
        let d = heads * dim(&mut rng);
        let (lq, b, p) = (dim(&mut rng), dim(&mut rng), rng.gen_range(0..3));
        let lk = lq + p;
        let ins = [rnd(&[lq, b, d], &mut rng), rnd(&[lk, b, d], &mut rng), rnd(&[lk, b, d], &mut rng)];
        for mask in [AttentionMask::Full, AttentionMask::Causal { prefix_len: p }] {
            assert_ok(
                "attention",
                gradcheck(&ins, EPS, seed, |t, v| t.attention(v[0], v[1], v[2], heads, mask)),
            );
        }
    }
}

#[test]
fn cross_entropy_with_ignored_targets() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (rows, vocab) = (dim(&mut rng) + 1, dim(&mut rng) + 1);
        let mut targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
        targets[0] = IGNORE_INDEX;
        assert_ok(
            "cross_entropy",
            gradcheck(&[rnd(&[rows, vocab], &mut rng)], EPS, seed, |t, v| t.cross_entropy(v[0], &targets)),
        );
    }
}

/// Every parameter of a full block (with each prefix encoder) and its input.
#[test]
fn full_block_forward() {
    for (seed, prefix) in [
        (0u64, None),
        (1, Some(PrefixEncoderKind::Identity)),
        (2, Some(PrefixEncoderKind::Mlp { hidden: 3 })),
    ] {
        for (name, e) in common::block_gradcheck(seed, prefix) {
            assert!(e <= TOL, "block {name} rel err {e}");
        }
    }
}

/// Backward of a sum of two graphs equals the sum of separate backwards.
#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let x = rnd(&[3, 4], &mut rng).with_requires_grad(true);
    let w = rnd(&[4, 2], &mut rng).with_requires_grad(true);
    let run = |which: u8| {
        let mut t = Tape::new();
        let xv = t.leaf(&x);
        let wv = t.leaf(&w);
        let f = t.matmul(xv, wv).unwrap();
        let f = t.tanh(f);
        let f = t.sum(f);
        let g = t.gelu(xv);
        let g = t.sum(g);
        let loss = match which {
            0 => f,
            1 => g,
            _ => t.add(f, g).unwrap(),
        };
        t.backward(loss).unwrap().get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 12])
    };
    let (a, b, c) = (run(0), run(1), run(2));
    for i in 0..12 {
        assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
    }
}
