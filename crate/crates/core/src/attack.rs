//! Inversion attack on captured smashed data.
//!
//! A server colluding with one client trains an inverse model `F⁻¹` from the
//! client's front `F` on that client's private (shadow) sentences, then
//! decodes smashed data captured from another client. Running it against an
//! embedding-only front and against a front that also holds block 0 measures
//! how much the extra block hides.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Zipf;
use crate::error::{Error, Result};
use crate::eval::{MetricReport, SeedScores, Scores};
use crate::model::{Block, GlmModel, ModelConfig, OutputHead, TokenBatch};
use crate::orchestrator::derive_seed;
use crate::params::{join, Binder, Parameterized};
use crate::split::{split, ClientFront, SplitPlan};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::transport::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitVariant {
    /// Client keeps only the embedding.
    EmbeddingOnly,
    /// Client keeps the embedding and block 0.
    FrontBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InverseArch {
    LinearDecoder,
    /// `depth` non-causal blocks and a vocabulary head.
    SingleBlockDecoder { depth: usize },
}

impl SplitVariant {
    /// Default decoder for each cut.
    pub fn paired_arch(self) -> InverseArch {
        match self {
            SplitVariant::EmbeddingOnly => InverseArch::LinearDecoder,
            SplitVariant::FrontBlock => InverseArch::SingleBlockDecoder { depth: 1 },
        }
    }
}

/// Which unigram ranking the victim's sentences follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimVocab {
    /// Same distribution as the shadow data.
    #[default]
    Same,
    /// Same Zipf weights over a shuffled token ranking.
    Shuffled,
}

/// `0.02 · 4096 / 64`: keeps `init_std · hidden` of a 4096-wide model at
/// the default width of 64.
pub const VICTIM_INIT_STD: f64 = 1.28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub split_variant: SplitVariant,
    /// `None` uses [`SplitVariant::paired_arch`].
    pub inverse_arch: Option<InverseArch>,
    /// Share of the corpus held by the colluding client.
    pub shadow_fraction: f64,
    pub seeds: Vec<u64>,
    /// Victim model. The default init scale is large for its width so that
    /// block 0's attention and MLP outputs dominate the embedding in the
    /// residual stream, as they do in wide models at the usual 0.02 scale.
    pub model: ModelConfig,
    pub sentences: usize,
    pub sentence_len: usize,
    pub zipf_exponent: f64,
    pub victim_vocab: VictimVocab,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            split_variant: SplitVariant::FrontBlock,
            inverse_arch: None,
            shadow_fraction: 0.5,
            seeds: vec![0, 1, 2],
            model: ModelConfig {
                init_std: VICTIM_INIT_STD,
                ..ModelConfig::default()
            },
            sentences: 600,
            sentence_len: 12,
            zipf_exponent: 1.1,
            victim_vocab: VictimVocab::Same,
            epochs: 20,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl AttackConfig {
    pub fn arch(&self) -> InverseArch {
        self.inverse_arch.unwrap_or_else(|| self.split_variant.paired_arch())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.shadow_fraction > 0.0 && self.shadow_fraction < 1.0) {
            return bad("shadow_fraction must be in (0, 1)");
        }
        if self.seeds.is_empty() {
            return bad("attack needs at least one seed");
        }
        if self.sentences < 2 || self.sentence_len == 0 || self.sentence_len > self.model.max_seq_len {
            return bad("sentences ≥ 2 and sentence_len in 1..=max_seq_len required");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if let InverseArch::SingleBlockDecoder { depth: 0 } = self.arch() {
            return bad("decoder depth must be at least 1");
        }
        if self.model.n_blocks < 3 {
            return bad("victim model needs at least 3 blocks");
        }
        Ok(())
    }
}

/// The colluding client's private sentences, handed to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowDataset {
    pub sentences: Vec<Vec<usize>>,
}

/// Shadow and victim sentences for one seed; no victim sentence appears in
/// the shadow set.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub shadow: ShadowDataset,
    pub victim: Vec<Vec<usize>>,
}

pub fn toy_corpus(cfg: &AttackConfig, seed: u64) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "attack-corpus", 0));
    let vocab = cfg.model.vocab;
    let base = Zipf::new(vocab, cfg.zipf_exponent, None)?;
    let n_shadow = ((cfg.sentences as f64 * cfg.shadow_fraction).round() as usize).clamp(1, cfg.sentences - 1);
    let shadow = base.sentences(n_shadow, cfg.sentence_len, &mut rng);
    let victim_dist = match cfg.victim_vocab {
        VictimVocab::Same => base,
        VictimVocab::Shuffled => Zipf::shuffled(vocab, cfg.zipf_exponent, &mut rng)?,
    };
    let seen: std::collections::HashSet<&Vec<usize>> = shadow.iter().collect();
    let mut victim = Vec::with_capacity(cfg.sentences - n_shadow);
    while victim.len() < cfg.sentences - n_shadow {
        let s = victim_dist.sentences(1, cfg.sentence_len, &mut rng).pop().expect("one sentence");
        if !seen.contains(&s) {
            victim.push(s);
        }
    }
    Ok(Corpus {
        shadow: ShadowDataset { sentences: shadow },
        victim,
    })
}

/// The shared client front of a freshly initialised model, cut as `variant`.
pub fn victim_front(model: &ModelConfig, variant: SplitVariant, seed: u64) -> Result<ClientFront> {
    let m = GlmModel::new(model.clone(), derive_seed(seed, "attack-model", 0))?;
    let plan = match variant {
        SplitVariant::EmbeddingOnly => SplitPlan::embedding_only(model.n_blocks)?,
        SplitVariant::FrontBlock => SplitPlan::standard(model.n_blocks)?,
    };
    Ok(split(m, &plan)?.0)
}

/// Smashed data for `sentences` in batches of `batch`, each `L × B × d`.
pub fn smash(front: &ClientFront, sentences: &[Vec<usize>], batch: usize) -> Result<Vec<Tensor>> {
    sentences
        .chunks(batch.max(1))
        .map(|c| front.infer(&TokenBatch::from_sequences(c)?))
        .collect()
}

/// Capture records as the server writes them (32-bit data).
pub fn write_capture(w: &mut impl Write, tensors: &[Tensor]) -> Result<()> {
    for t in tensors {
        wire::write_capture_record(&mut *w, t)?;
    }
    Ok(())
}

pub fn read_capture_file(path: &Path) -> Result<Vec<Tensor>> {
    wire::read_capture(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Inverse model `F⁻¹`: smashed data to per-position token logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Linear { weight: Tensor, bias: Tensor },
    Transformer { blocks: Vec<Block>, head: OutputHead },
}

impl Decoder {
    pub fn new(arch: InverseArch, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        match arch {
            InverseArch::LinearDecoder => Decoder::Linear {
                weight: Tensor::randn(&[model.hidden, model.vocab], model.init_std, rng).with_requires_grad(true),
                bias: Tensor::zeros(&[model.vocab]).with_requires_grad(true),
            },
            InverseArch::SingleBlockDecoder { depth } => Decoder::Transformer {
                blocks: (0..depth)
                    .map(|i| Block::new(i, model.hidden, model.heads, model.hidden * model.ffn_mult, model.init_std, rng))
                    .collect(),
                head: OutputHead::new(model, rng),
            },
        }
    }

    fn width(&self) -> usize {
        match self {
            Decoder::Linear { weight, .. } => weight.shape()[0],
            Decoder::Transformer { head, .. } => head.weight.shape()[0],
        }
    }

    fn forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> Result<Var> {
        match self {
            Decoder::Linear { weight, bias } => {
                let w = binder.bind(tape, "linear.weight".into(), weight);
                let b = binder.bind(tape, "linear.bias".into(), bias);
                let y = tape.linear(h, w)?;
                tape.add_bias(y, b)
            }
            Decoder::Transformer { blocks, head } => {
                let mut h = h;
                for b in blocks {
                    h = b.forward(tape, binder, h, false)?;
                }
                head.forward(tape, binder, h)
            }
        }
    }

    /// Logits `L × B × V` for one smashed tensor.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let s = h.shape();
        if s.len() != 3 || s[2] != self.width() {
            return Err(Error::shape("inverse model input", s, &[0, 0, self.width()]));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(h);
        let y = self.forward(&mut tape, &mut binder, x)?;
        Ok(tape.tensor(y))
    }
}

impl Parameterized for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Decoder::Linear { weight, bias } => {
                f(&join(prefix, "linear.weight"), weight);
                f(&join(prefix, "linear.bias"), bias);
            }
            Decoder::Transformer { blocks, head } => {
                for b in blocks {
                    b.visit(&join(prefix, &b.path()), f);
                }
                head.visit(prefix, f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Decoder::Linear { weight, bias } => {
                f(&join(prefix, "linear.weight"), weight);
                f(&join(prefix, "linear.bias"), bias);
            }
            Decoder::Transformer { blocks, head } => {
                for b in blocks {
                    let p = join(prefix, &b.path());
                    b.visit_mut(&p, f);
                }
                head.visit_mut(prefix, f);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl TrainOptions {
    pub fn of(cfg: &AttackConfig, seed: u64) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
            seed,
        }
    }
}

/// Per-feature centring and scaling fitted on the shadow smashed data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(tensors: &[Tensor]) -> Result<Self> {
        let d = tensors
            .first()
            .map(|t| *t.shape().last().unwrap_or(&0))
            .ok_or_else(|| Error::Contract("no smashed data to fit".into()))?;
        let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
        for t in tensors {
            for row in t.data().chunks(d) {
                for k in 0..d {
                    sum[k] += row[k];
                    sq[k] += row[k] * row[k];
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| 1.0 / (q / n as f64 - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if h.shape().last() != Some(&d) {
            return Err(Error::shape("standardizer input", h.shape(), &[d]));
        }
        let mut data = h.data().to_vec();
        for row in data.chunks_mut(d) {
            for k in 0..d {
                row[k] = (row[k] - self.mean[k]) * self.inv_std[k];
            }
        }
        Tensor::new(h.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone)]
pub struct InverseModel {
    pub arch: InverseArch,
    pub scaler: Standardizer,
    pub decoder: Decoder,
    /// Mean training cross-entropy per epoch.
    pub curve: Vec<f64>,
}

impl InverseModel {
    /// Logits `L × B × V` for one captured tensor.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let s = h.shape();
        let d = self.decoder.width();
        if s.len() != 3 || s[2] != d {
            return Err(Error::shape("inverse model input", s, &[0, 0, d]));
        }
        self.decoder.logits(&self.scaler.apply(h)?)
    }
}

/// Fits `F⁻¹` on `(F(x), x)` pairs from the shadow set. `front` is only
/// evaluated, never modified. Zero epochs returns the initialised decoder.
pub fn train_inverse(front: &ClientFront, shadow: &ShadowDataset, arch: InverseArch, opts: &TrainOptions) -> Result<InverseModel> {
    if shadow.sentences.is_empty() {
        return Err(Error::Contract("shadow dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "inverse", 0));
    let mut decoder = Decoder::new(arch, &front.config, &mut rng);
    let raw = smash(front, &shadow.sentences, 1)?;
    let scaler = Standardizer::fit(&raw)?;
    let smashed = raw.iter().map(|t| scaler.apply(t)).collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(opts.optimizer);
    let mut order: Vec<usize> = (0..shadow.sentences.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let h = Tensor::stack_batch(&chunk.iter().map(|&i| smashed[i].clone()).collect::<Vec<_>>())?;
            let sents: Vec<Vec<usize>> = chunk.iter().map(|&i| shadow.sentences[i].clone()).collect();
            let targets = TokenBatch::from_sequences(&sents)?.ids;
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = tape.leaf(&h);
            let logits = decoder.forward(&mut tape, &mut binder, x)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let l = tape.value(loss)[0];
            if !l.is_finite() {
                return Err(Error::Diverged(format!("inverse model loss is {l} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            binder.accumulate(&mut decoder, "", &grads)?;
            opt.step(&mut decoder, 1.0);
            sum += l;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!("inverse epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    Ok(InverseModel {
        arch,
        scaler,
        decoder,
        curve,
    })
}

/// One decoded sequence with the softmax probability of each chosen token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub tokens: Vec<usize>,
    pub confidence: Vec<f64>,
}

/// Greedy per-position decode of captured smashed data. Works only on the
/// captured tensors; nothing else about the victim is visible here.
pub fn attack(inv: &InverseModel, captured: &[Tensor]) -> Result<Vec<Reconstruction>> {
    let mut out = Vec::new();
    for h in captured {
        let logits = inv.logits(h)?;
        let (l, b, v) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let mut recs = vec![
            Reconstruction {
                tokens: Vec::with_capacity(l),
                confidence: Vec::with_capacity(l),
            };
            b
        ];
        for (row_i, row) in logits.data().chunks(v).enumerate() {
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &z)| if z > acc.1 { (i, z) } else { acc });
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let r = &mut recs[row_i % b];
            r.tokens.push(arg);
            r.confidence.push(1.0 / z);
        }
        out.extend(recs);
    }
    Ok(out)
}

/// Text-overlap scores of reconstructions against the true sentences.
pub fn evaluate_attack(recs: &[Reconstruction], truth: &[Vec<usize>]) -> Result<Scores> {
    if recs.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} reconstructions for {} reference sentences",
            recs.len(),
            truth.len()
        )));
    }
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = recs.iter().zip(truth).map(|(r, t)| (r.tokens.clone(), t.clone())).collect();
    Ok(Scores::of_pairs(&pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub curve: Vec<f64>,
    /// Token accuracy on the shadow set itself.
    pub shadow_accuracy: Option<f64>,
    pub scores: Option<Scores>,
    /// Set when the inverse model diverged.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: SplitVariant,
    pub arch: InverseArch,
    pub victim_vocab: VictimVocab,
    pub seeds: Vec<SeedOutcome>,
    /// Averages over the seeds that did not fail.
    pub metrics: MetricReport,
}

fn run_seed(cfg: &AttackConfig, seed: u64, capture_dir: Option<&Path>) -> Result<SeedOutcome> {
    let corpus = toy_corpus(cfg, seed)?;
    let front = victim_front(&cfg.model, cfg.split_variant, seed)?;
    // Victim traffic goes through the 32-bit capture format.
    let mut buf = Vec::new();
    write_capture(&mut buf, &smash(&front, &corpus.victim, cfg.batch_size)?)?;
    if let Some(dir) = capture_dir {
        let name = format!("capture-{}-seed{seed}.bin", variant_name(cfg.split_variant));
        std::fs::write(dir.join(name), &buf)?;
    }
    let captured = wire::read_capture(buf.as_slice())?;
    let inv = match train_inverse(&front, &corpus.shadow, cfg.arch(), &TrainOptions::of(cfg, seed)) {
        Ok(inv) => inv,
        Err(Error::Diverged(m)) => {
            log::warn!("seed {seed}: attack failed: {m}");
            return Ok(SeedOutcome {
                seed,
                curve: Vec::new(),
                shadow_accuracy: None,
                scores: None,
                failed: Some(m),
            });
        }
        Err(e) => return Err(e),
    };
    let shadow_recs = attack(&inv, &smash(&front, &corpus.shadow.sentences, cfg.batch_size)?)?;
    let shadow_accuracy = evaluate_attack(&shadow_recs, &corpus.shadow.sentences)?.accuracy;
    let scores = evaluate_attack(&attack(&inv, &captured)?, &corpus.victim)?;
    Ok(SeedOutcome {
        seed,
        curve: inv.curve,
        shadow_accuracy: Some(shadow_accuracy),
        scores: Some(scores),
        failed: None,
    })
}

fn variant_name(v: SplitVariant) -> &'static str {
    match v {
        SplitVariant::EmbeddingOnly => "embedding_only",
        SplitVariant::FrontBlock => "front_block",
    }
}

/// Runs the attack for every seed of `cfg`. Capture files are written to
/// `capture_dir` when given.
pub fn run_variant(cfg: &AttackConfig, capture_dir: Option<&Path>) -> Result<VariantReport> {
    cfg.validate()?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s, capture_dir))
        .collect::<Result<Vec<_>>>()?;
    let ok: Vec<SeedScores> = seeds
        .iter()
        .filter_map(|o| o.scores.map(|scores| SeedScores { seed: o.seed, scores }))
        .collect();
    Ok(VariantReport {
        variant: cfg.split_variant,
        arch: cfg.arch(),
        victim_vocab: cfg.victim_vocab,
        seeds,
        metrics: MetricReport::from_seeds(ok),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub embedding_accuracy: f64,
    pub front_block_accuracy: f64,
    pub embedding_rouge_1: f64,
    pub front_block_rouge_1: f64,
}

/// Both cuts attacked with their paired decoders on the same corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialReport {
    pub embedding_only: VariantReport,
    pub front_block: VariantReport,
    pub per_seed: Vec<SeedComparison>,
    /// Mean embedding-only token accuracy over mean front-block accuracy.
    pub accuracy_ratio: f64,
    /// Front-block ROUGE-1 below embedding-only ROUGE-1 in every seed.
    pub rouge_1_ordered: bool,
}

impl DifferentialReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Runs both variants of `base` (its `split_variant` and `inverse_arch` are
/// ignored) and compares them seed by seed.
pub fn run_differential(base: &AttackConfig, capture_dir: Option<&Path>) -> Result<DifferentialReport> {
    let with = |v| AttackConfig {
        split_variant: v,
        inverse_arch: None,
        ..base.clone()
    };
    let embedding_only = run_variant(&with(SplitVariant::EmbeddingOnly), capture_dir)?;
    let front_block = run_variant(&with(SplitVariant::FrontBlock), capture_dir)?;
    let mut per_seed = Vec::new();
    for (e, f) in embedding_only.seeds.iter().zip(&front_block.seeds) {
        if let (Some(es), Some(fs)) = (e.scores, f.scores) {
            per_seed.push(SeedComparison {
                seed: e.seed,
                embedding_accuracy: es.accuracy,
                front_block_accuracy: fs.accuracy,
                embedding_rouge_1: es.rouge_1,
                front_block_rouge_1: fs.rouge_1,
            });
        }
    }
    let fb = front_block.metrics.mean.accuracy;
    let accuracy_ratio = if fb > 0.0 {
        embedding_only.metrics.mean.accuracy / fb
    } else {
        f64::INFINITY
    };
    let rouge_1_ordered = per_seed.len() == base.seeds.len()
        && per_seed.iter().all(|s| s.front_block_rouge_1 < s.embedding_rouge_1);
    Ok(DifferentialReport {
        embedding_only,
        front_block,
        per_seed,
        accuracy_ratio,
        rouge_1_ordered,
    })
}
