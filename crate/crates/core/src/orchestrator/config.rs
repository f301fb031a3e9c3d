use serde::{Deserialize, Serialize};

use super::partition::PartitionMode;
use crate::crypto::rsa::MIN_KEY_BITS;
use crate::crypto::{KeyRotationPolicy, PayloadMode};
use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::AdamConfig;
use crate::transport::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStrategy {
    /// One client at a time against a single server body.
    #[default]
    Serial,
    /// All clients in lockstep; the server stacks their smashed data into
    /// one batch per round.
    ClientBatch,
    /// One server body replica per client, averaged at period ends.
    ServerHierarchical,
}

impl TrainingStrategy {
    pub const ALL: [TrainingStrategy; 3] = [Self::Serial, Self::ClientBatch, Self::ServerHierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Self::Serial => "serial",
            Self::ClientBatch => "client_batch",
            Self::ServerHierarchical => "server_hierarchical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AveragingConfig {
    /// Local steps per client between averaging rendezvous.
    pub period_steps: u64,
    /// Hierarchical mode: average the server replicas too.
    pub average_server_replicas: bool,
    /// Drop optimizer moments after parameters are replaced by an average.
    pub reset_optimizer: bool,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            period_steps: 50,
            average_server_replicas: true,
            reset_optimizer: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// Listen address for the server. Port 0 picks a free port for
    /// single-process runs.
    pub bind: String,
    pub connect_timeout_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: TransportKind::Loopback,
            bind: "127.0.0.1:7878".into(),
            connect_timeout_ms: 10_000,
        }
    }
}

/// Makes one client disconnect after a number of completed steps. Test aid;
/// not part of the JSON schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientDrop {
    pub client_id: u32,
    pub after_steps: u64,
}

/// Everything a run needs. Unknown JSON fields are rejected and missing
/// ones take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: TrainingStrategy,
    pub clients: usize,
    /// Rounds per client.
    pub steps: u64,
    /// Samples per client per round.
    pub batch_size: usize,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub averaging: AveragingConfig,
    /// Freeze base weights and train only the per-block prefixes.
    pub prefix_tuning: bool,
    pub rotation: KeyRotationPolicy,
    pub key_bits: u64,
    pub payload: PayloadMode,
    pub wire_dtype: Dtype,
    /// Client-batch mode: scale the summed body gradient by `1/M`.
    pub mean_client_batch_gradients: bool,
    pub straggler_timeout_ms: u64,
    pub task: TaskConfig,
    pub partition: PartitionMode,
    pub transport: TransportConfig,
    pub seed: u64,
    /// Append every smashed-data tensor the server receives to this file.
    pub capture: Option<String>,
    #[serde(skip)]
    pub fault: Option<ClientDrop>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: TrainingStrategy::Serial,
            clients: 2,
            steps: 300,
            batch_size: 1,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            averaging: AveragingConfig::default(),
            prefix_tuning: false,
            rotation: KeyRotationPolicy::default(),
            key_bits: 2048,
            payload: PayloadMode::Sealed,
            wire_dtype: Dtype::F32,
            mean_client_batch_gradients: false,
            straggler_timeout_ms: 30_000,
            task: TaskConfig::default(),
            partition: PartitionMode::Iid,
            transport: TransportConfig::default(),
            seed: 0,
            capture: None,
            fault: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.clients > u32::MAX as usize {
            return bad("too many clients".into());
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1".into());
        }
        if self.averaging.period_steps == 0 {
            return bad("averaging.period_steps must be at least 1".into());
        }
        if self.key_bits < MIN_KEY_BITS {
            return bad(format!("key_bits must be at least {MIN_KEY_BITS}"));
        }
        if self.straggler_timeout_ms == 0 {
            return bad("straggler_timeout_ms must be positive".into());
        }
        let lr = self.optimizer.lr;
        if !(lr.is_finite() && lr > 0.0) {
            return bad("optimizer.lr must be positive".into());
        }
        if self.prefix_tuning && self.model.prefix_len == 0 {
            return bad("prefix_tuning needs model.prefix_len > 0".into());
        }
        self.rotation.validate()?;
        self.task.validate(self.model.vocab, self.model.max_seq_len)?;
        self.partition.validate(self.clients, self.task.is_classification())?;
        Ok(())
    }

    /// Number of averaging periods and the round count of each.
    pub fn periods(&self) -> Vec<u64> {
        let p = self.averaging.period_steps;
        let mut out = vec![p; (self.steps / p) as usize];
        if !self.steps.is_multiple_of(p) {
            out.push(self.steps % p);
        }
        out
    }

    /// 1-based averaging period that contains `round`.
    pub fn period_of(&self, round: u64) -> u64 {
        (round.max(1) - 1) / self.averaging.period_steps + 1
    }
}

/// Deterministic sub-seed for one named stream of a run.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
