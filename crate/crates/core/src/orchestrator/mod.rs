//! Training drivers for the three strategies, federated averaging, data
//! partitioning and run metrics.
//!
//! The server side is a message loop over client connections and never
//! sees token ids or labels: clients send smashed data, boundary gradients
//! and parameter sets only.

pub mod average;
mod client;
pub mod config;
pub mod metrics;
pub mod partition;
mod server;

pub use average::{fed_average, Rendezvous};
pub use client::ClientSession;
pub use config::{
    derive_seed, AveragingConfig, ClientDrop, RunConfig, TrainingStrategy, TransportConfig, TransportKind,
};
pub use metrics::{ClientSummary, RunSummary, ServerStats, StepRecord};
pub use partition::{partition, DataPartition, PartitionMode, Sampler};
pub use server::{LoopMode, ServerLoop, ServerOutcome};

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, DatasetEval, SplitView};
use crate::model::{freeze_base_train_prefix, GlmModel};
use crate::split::{reassemble, split, ClientParts, ServerBody, SplitPlan};
use crate::transport::{loopback_pair, Connection, Tap};

/// `ProtocolError` codes.
pub mod codes {
    use crate::error::Error;

    /// The round was aborted; the client skips it and continues.
    pub const STALE_ROUND: u16 = 1;
    pub const FRAMING: u16 = 2;
    pub const PROTOCOL: u16 = 3;
    pub const CRYPTO: u16 = 4;
    pub const SHAPE: u16 = 5;
    pub const INTERNAL: u16 = 6;

    pub fn of(e: &Error) -> u16 {
        match e {
            Error::StaleRound { .. } => STALE_ROUND,
            Error::Framing(_) => FRAMING,
            Error::Protocol(_) | Error::Disconnected(_) | Error::Timeout(_) => PROTOCOL,
            Error::Crypto(_) => CRYPTO,
            Error::Shape { .. } => SHAPE,
            _ => INTERNAL,
        }
    }
}

/// Associated data binding a sealed payload to its kind, client and round.
pub(crate) fn aad(kind: &str, client_id: u32, n: u64) -> Vec<u8> {
    format!("{kind}/{client_id}/{n}").into_bytes()
}

/// Everything both sides derive from the config and master seed: data,
/// shards and the initial split model.
#[derive(Debug)]
pub struct Setup {
    pub train: Arc<Dataset>,
    pub eval: Dataset,
    pub partition: DataPartition,
    pub parts: ClientParts,
    pub body: ServerBody,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, eval) = cfg.task.build(derive_seed(cfg.seed, "data", 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "partition", 0));
    let partition = partition(&train, &cfg.partition, cfg.clients, &mut rng)?;
    if let Some((c, p)) = partition
        .per_client
        .iter()
        .enumerate()
        .find(|(_, p)| p.len() < cfg.batch_size)
    {
        return Err(Error::Config(format!(
            "client {c} holds {} samples, fewer than batch_size {}",
            p.len(),
            cfg.batch_size
        )));
    }
    let mut model = GlmModel::new(cfg.model.clone(), derive_seed(cfg.seed, "model", 0))?;
    if cfg.prefix_tuning {
        freeze_base_train_prefix(&mut model)?;
    }
    let (front, body, tail) = split(model, &SplitPlan::standard(cfg.model.n_blocks)?)?;
    Ok(Setup {
        train: Arc::new(train),
        eval,
        partition,
        parts: ClientParts { front, tail },
        body,
    })
}

/// Extras for an in-process run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Records every frame the clients send.
    pub client_tap: Option<Tap>,
    /// Set to stop after the current round; partial metrics are kept.
    pub stop: Option<Arc<AtomicBool>>,
}

impl RunOptions {
    fn stopped(&self) -> bool {
        self.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst))
    }
}

/// Result of an in-process run.
#[derive(Debug)]
pub struct RunReport {
    pub records: Vec<StepRecord>,
    pub clients: Vec<ClientSummary>,
    pub client_parts: Vec<ClientParts>,
    /// One body, or one per replica in hierarchical mode.
    pub bodies: Vec<ServerBody>,
    pub server: ServerStats,
    pub wall_ms: f64,
    pub interrupted: bool,
    pub eval: Option<DatasetEval>,
}

impl RunReport {
    pub fn summary(&self, cfg: &RunConfig) -> RunSummary {
        let window = cfg.averaging.period_steps.min(10);
        let w = metrics::loss_window(&self.records, window);
        RunSummary {
            config: cfg.clone(),
            wall_ms: self.wall_ms,
            interrupted: self.interrupted,
            initial_loss: w.map(|w| w.0),
            final_loss: w.map(|w| w.1),
            clients: self.clients.clone(),
            server: self.server,
            periods: metrics::period_stats(cfg, &self.records),
            eval: self.eval,
        }
    }

    /// The trained model rebuilt from the first surviving client and the
    /// first body.
    pub fn model(&self) -> Result<GlmModel> {
        let i = self
            .clients
            .iter()
            .position(|c| !c.dropped)
            .ok_or_else(|| Error::Contract("no surviving client".into()))?;
        let p = &self.client_parts[i];
        reassemble(p.front.clone(), self.bodies[0].clone(), p.tail.clone())
    }
}

fn loop_mode(s: TrainingStrategy) -> LoopMode {
    match s {
        TrainingStrategy::ClientBatch => LoopMode::Stacked,
        _ => LoopMode::Immediate,
    }
}

/// Starts the server loop(s) for `conns`: one loop for serial and
/// client-batch, one replica per connection for hierarchical.
pub fn spawn_server(cfg: &Arc<RunConfig>, body: ServerBody, conns: Vec<Connection>) -> Result<Vec<JoinHandle<Result<ServerOutcome>>>> {
    let spawn = |name: String, l: ServerLoop| {
        std::thread::Builder::new()
            .name(name)
            .spawn(move || l.run())
            .map_err(Error::Io)
    };
    match cfg.strategy {
        TrainingStrategy::ServerHierarchical => {
            let rv = Arc::new(Rendezvous::new(conns.len()));
            conns
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    let l = ServerLoop::new(cfg.clone(), LoopMode::Immediate, body.clone(), vec![c], i as u64)?
                        .with_rendezvous(rv.clone());
                    spawn(format!("replica-{i}"), l)
                })
                .collect()
        }
        s => Ok(vec![spawn(
            "server".into(),
            ServerLoop::new(cfg.clone(), loop_mode(s), body, conns, 0)?,
        )?]),
    }
}

/// Waits for the server loops and gathers their bodies and counters.
pub fn join_server(handles: Vec<JoinHandle<Result<ServerOutcome>>>) -> Result<(Vec<ServerBody>, ServerStats)> {
    let mut bodies = Vec::new();
    let mut stats = ServerStats::default();
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(o)) => {
                stats.merge(&o.stats);
                bodies.push(o.body);
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(Error::Contract("server thread panicked".into()));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((bodies, stats)),
    }
}

/// Runs every period for the given sessions: serial mode one client after
/// another, otherwise all concurrently; client parts are averaged through
/// the server at each period end.
pub fn drive(cfg: &RunConfig, sessions: &mut [ClientSession], opts: &RunOptions) -> bool {
    let stop = || opts.stopped();
    for (k, &rounds) in cfg.periods().iter().enumerate() {
        let period = k as u64 + 1;
        match cfg.strategy {
            TrainingStrategy::Serial => {
                for s in sessions.iter_mut().filter(|s| s.is_alive()) {
                    let _ = s.run_rounds(rounds, &stop);
                }
                if stop() {
                    return true;
                }
                for s in sessions.iter_mut().filter(|s| s.is_alive()) {
                    let _ = s.send_params(period);
                }
                for s in sessions.iter_mut().filter(|s| s.is_alive()) {
                    let _ = s.recv_params(period);
                }
            }
            _ => {
                std::thread::scope(|scope| {
                    for s in sessions.iter_mut().filter(|s| s.is_alive()) {
                        let stop = &stop;
                        scope.spawn(move || {
                            s.run_rounds(rounds, stop)?;
                            if stop() {
                                s.close();
                                return Ok(());
                            }
                            s.send_params(period)?;
                            s.recv_params(period)
                        });
                    }
                });
                if stop() {
                    return true;
                }
            }
        }
        log::info!("period {period} done");
    }
    false
}

fn connections(cfg: &RunConfig) -> Result<(Vec<Connection>, Vec<Connection>)> {
    let mut clients = Vec::with_capacity(cfg.clients);
    let mut servers = Vec::with_capacity(cfg.clients);
    match cfg.transport.kind {
        TransportKind::Loopback => {
            for _ in 0..cfg.clients {
                let (c, s) = loopback_pair();
                clients.push(c);
                servers.push(s);
            }
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind(&cfg.transport.bind)?;
            let addr = listener.local_addr()?;
            for _ in 0..cfg.clients {
                clients.push(Connection::connect(addr, Duration::from_millis(cfg.transport.connect_timeout_ms))?);
                servers.push(Connection::tcp(listener.accept()?.0)?);
            }
        }
    }
    Ok((clients, servers))
}

/// Trains with server and clients in this process.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    run_with(cfg, &RunOptions::default())
}

pub fn run_with(cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    let s = setup(cfg)?;
    let cfg = Arc::new(cfg.clone());
    let started = Instant::now();
    let (client_conns, server_conns) = connections(&cfg)?;
    let handles = spawn_server(&cfg, s.body, server_conns)?;
    let mut sessions = Vec::with_capacity(cfg.clients);
    for (i, conn) in client_conns.into_iter().enumerate() {
        let conn = match &opts.client_tap {
            Some(t) => conn.with_tap(t),
            None => conn,
        };
        let shard = s.partition.per_client[i].clone();
        let session = ClientSession::new(cfg.clone(), i as u32, s.parts.clone(), s.train.clone(), shard, conn, started)?;
        sessions.push(session);
    }
    for session in &mut sessions {
        let _ = session.connect();
    }
    let interrupted = drive(&cfg, &mut sessions, opts);
    let mut records = Vec::new();
    let mut clients = Vec::new();
    let mut client_parts = Vec::new();
    for session in sessions {
        let (parts, recs, summary) = session.finish();
        records.extend(recs);
        clients.push(summary);
        client_parts.push(parts);
    }
    let (bodies, server) = join_server(handles)?;
    if let Some(c) = clients.iter().find(|c| c.dropped) {
        if clients.iter().all(|c| c.dropped) {
            return Err(Error::Protocol(format!(
                "every client dropped; client {}: {}",
                c.client_id,
                c.error.as_deref().unwrap_or("unknown")
            )));
        }
    }
    let mut report = RunReport {
        records,
        clients,
        client_parts,
        bodies,
        server,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        interrupted,
        eval: None,
    };
    if let Some(i) = report.clients.iter().position(|c| !c.dropped) {
        let p = &report.client_parts[i];
        let view = SplitView {
            front: &p.front,
            body: &report.bodies[0],
            tail: &p.tail,
        };
        report.eval = Some(evaluate_dataset(&view, &s.eval)?);
    }
    Ok(report)
}

/// Server side of a multi-process run: accepts `cfg.clients` connections on
/// `listener`, trains until they all close and returns the final bodies.
pub fn serve(cfg: &RunConfig, listener: &TcpListener) -> Result<(Vec<ServerBody>, ServerStats)> {
    let s = setup(cfg)?;
    let cfg = Arc::new(cfg.clone());
    let mut conns = Vec::with_capacity(cfg.clients);
    while conns.len() < cfg.clients {
        let (stream, addr) = listener.accept()?;
        log::info!("client connection {} from {addr}", conns.len());
        conns.push(Connection::tcp(stream)?);
    }
    join_server(spawn_server(&cfg, s.body, conns)?)
}

/// One client of a multi-process run.
pub fn run_client(cfg: &RunConfig, client_id: u32, conn: Connection, opts: &RunOptions) -> Result<(ClientParts, Vec<StepRecord>, ClientSummary)> {
    let s = setup(cfg)?;
    let shard = s
        .partition
        .per_client
        .get(client_id as usize)
        .ok_or_else(|| Error::Config(format!("client id {client_id} is outside 0..{}", cfg.clients)))?
        .clone();
    let cfg = Arc::new(cfg.clone());
    let mut session = ClientSession::new(cfg.clone(), client_id, s.parts, s.train, shard, conn, Instant::now())?;
    session.connect()?;
    drive(&cfg, std::slice::from_mut(&mut session), opts);
    let out = session.finish();
    if let Some(e) = &out.2.error {
        return Err(Error::Protocol(e.clone()));
    }
    Ok(out)
}
