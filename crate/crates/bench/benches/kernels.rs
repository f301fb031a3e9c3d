use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splitfed_core::crypto::{accept_handshake, rsa, ClientHandshake};
use splitfed_core::model::{Block, GlmModel, ModelConfig, TokenBatch};
use splitfed_core::tensor::{AttentionMask, Tape};
use splitfed_core::transport::{Dtype, WireTensor};
use splitfed_core::{Binder, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(&a), t.leaf(&b));
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (l, b, d) = (16, 4, 64);
    let q = Tensor::randn(&[l, b, d], 1.0, &mut rng).with_requires_grad(true);
    let k = Tensor::randn(&[l, b, d], 1.0, &mut rng).with_requires_grad(true);
    let v = Tensor::randn(&[l, b, d], 1.0, &mut rng).with_requires_grad(true);
    c.bench_function("attention fwd+bwd 16x4x64", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.leaf(&q), t.leaf(&k), t.leaf(&v));
            let a = t.attention(qv, kv, vv, 4, AttentionMask::Causal { prefix_len: 0 }).unwrap();
            let s = t.sum(a);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn block(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let blk = Block::new(0, 64, 4, 256, 0.02, &mut rng);
    let h = Tensor::randn(&[16, 4, 64], 1.0, &mut rng).with_requires_grad(true);
    c.bench_function("block fwd+bwd 16x4x64", |bch| {
        bch.iter(|| {
            let mut t = Tape::new();
            let mut binder = Binder::new();
            let hv = t.leaf(&h);
            let out = blk.forward(&mut t, &mut binder, hv, true).unwrap();
            let s = t.sum(out);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn model_step(c: &mut Criterion) {
    let mut m = GlmModel::new(ModelConfig::default(), 3).unwrap();
    let x: Vec<usize> = (0..16).map(|i| (i * 7) % 256).collect();
    let batch = TokenBatch::single(&x);
    c.bench_function("default model loss+grads, one sequence", |bch| {
        bch.iter(|| black_box(m.accumulate_loss_grads(&batch, &x).unwrap()))
    });
}

fn crypto(c: &mut Criterion) {
    let mut g = c.benchmark_group("rsa keygen");
    g.sample_size(10);
    for bits in [512u64, 1024] {
        g.bench_with_input(BenchmarkId::from_parameter(bits), &bits, |bch, &bits| {
            let mut rng = ChaCha8Rng::seed_from_u64(bits);
            bch.iter(|| black_box(rsa::keygen(bits, &mut rng).unwrap()))
        });
    }
    g.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hs = ClientHandshake::new(512, &mut rng).unwrap();
    let (wrapped, mut server) = accept_handshake(&hs.public, &mut rng).unwrap();
    let mut client = hs.finish(&wrapped).unwrap();
    let payload = vec![7u8; 64 * 1024];
    c.bench_function("seal+open 64 KiB", |bch| {
        bch.iter(|| {
            let s = client.seal(&payload, b"bench").unwrap();
            black_box(server.open(&s, b"bench").unwrap());
        })
    });
}

fn wire(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Tensor::randn(&[16, 4, 64], 1.0, &mut rng);
    for dtype in [Dtype::F32, Dtype::F64] {
        c.bench_function(&format!("wire pack+unpack {dtype:?}"), |bch| {
            bch.iter(|| {
                let w = WireTensor::pack(&t, dtype, None, &[]).unwrap();
                black_box(w.unpack(None, &[]).unwrap());
            })
        });
    }
}

criterion_group!(benches, matmul, attention, block, model_step, crypto, wire);
criterion_main!(benches);
