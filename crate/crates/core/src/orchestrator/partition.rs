use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// How the training set is divided among clients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    /// Random split into near-equal disjoint shards.
    #[default]
    Iid,
    /// `fractions[label][client]`: share of each label's samples given to
    /// each client. Every row must sum to 1.
    LabelSkew { fractions: Vec<Vec<f64>> },
    /// Every client gets the whole set. Not a partition; used to give
    /// clients identical data.
    Replicate,
}

impl PartitionMode {
    /// Two clients for a binary task: client 0 receives the given share of
    /// each label, client 1 the rest.
    pub fn two_client_skew(zeros_to_first: f64, ones_to_first: f64) -> Self {
        PartitionMode::LabelSkew {
            fractions: vec![
                vec![zeros_to_first, 1.0 - zeros_to_first],
                vec![ones_to_first, 1.0 - ones_to_first],
            ],
        }
    }

    pub fn validate(&self, clients: usize, labeled: bool) -> Result<()> {
        if let PartitionMode::LabelSkew { fractions } = self {
            if !labeled {
                return Err(Error::Config("label_skew needs a labeled task".into()));
            }
            for (label, row) in fractions.iter().enumerate() {
                if row.len() != clients {
                    return Err(Error::Config(format!(
                        "label {label} has fractions for {} clients, run has {clients}",
                        row.len()
                    )));
                }
                if row.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
                    return Err(Error::Config(format!("label {label} has a negative or non-finite fraction")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("fractions for label {label} sum to {s}, not 1")));
                }
            }
        }
        Ok(())
    }
}

/// Per-client sample indices into one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPartition {
    pub mode: PartitionMode,
    pub per_client: Vec<Vec<usize>>,
}

/// Splits `n` items by `fractions` using largest remainders, so the counts
/// sum to exactly `n`. Ties go to the lower client index.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

pub fn partition<R: Rng + ?Sized>(data: &Dataset, mode: &PartitionMode, clients: usize, rng: &mut R) -> Result<DataPartition> {
    if clients == 0 {
        return Err(Error::Config("cannot partition among zero clients".into()));
    }
    let n = data.len();
    let per_client = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut out = Vec::with_capacity(clients);
            let mut start = 0;
            for c in 0..clients {
                let size = n / clients + usize::from(c < n % clients);
                let mut part = idx[start..start + size].to_vec();
                part.sort_unstable();
                out.push(part);
                start += size;
            }
            out
        }
        PartitionMode::LabelSkew { fractions } => {
            mode.validate(clients, true)?;
            let labels = data
                .labels()
                .ok_or_else(|| Error::Config("label_skew needs every sample labeled".into()))?;
            let mut out = vec![Vec::new(); clients];
            for (label, row) in fractions.iter().enumerate() {
                let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == label).collect();
                idx.shuffle(rng);
                let mut start = 0;
                for (c, k) in apportion(idx.len(), row).into_iter().enumerate() {
                    out[c].extend_from_slice(&idx[start..start + k]);
                    start += k;
                }
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= fractions.len()) {
                return Err(Error::Config(format!("label {l} has no fractions")));
            }
            out.iter_mut().for_each(|p| p.sort_unstable());
            out
        }
        PartitionMode::Replicate => vec![(0..n).collect(); clients],
    };
    Ok(DataPartition {
        mode: mode.clone(),
        per_client,
    })
}

/// Endless batches from one client's shard. Each epoch visits the shard in
/// an order drawn from `(seed, epoch)` alone, so clients holding the same
/// shard see the same sequence; a trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct Sampler {
    shard: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    batch: usize,
}

impl Sampler {
    pub fn new(shard: Vec<usize>, batch: usize, seed: u64) -> Result<Self> {
        if shard.len() < batch || batch == 0 {
            return Err(Error::Config(format!(
                "a shard of {} samples cannot fill batches of {batch}",
                shard.len()
            )));
        }
        let mut s = Self {
            shard,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            batch,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(super::derive_seed(self.seed, "order", self.epoch));
        self.order = self.shard.clone();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}
