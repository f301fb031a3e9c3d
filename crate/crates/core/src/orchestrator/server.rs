use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::average::{fed_average, Rendezvous};
use super::config::{derive_seed, RunConfig};
use super::metrics::ServerStats;
use super::{aad, codes};
use crate::crypto::{accept_handshake, PayloadMode, RsaPublicKey, SessionCipher};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Parameterized};
use crate::split::ServerBody;
use crate::tensor::{Adam, Tensor};
use crate::transport::{wire, Connection, FrameWriter, Incoming, Message, WireTensor};

/// How a loop schedules body passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    /// Each message is handled as it arrives.
    Immediate,
    /// Smashed data is held until every live client has sent its round (or
    /// the straggler deadline passes), then run as one stacked pass.
    Stacked,
}

struct Peer {
    client_id: Option<u32>,
    writer: Option<Box<dyn FrameWriter>>,
    cipher: Option<SessionCipher>,
    last_round: u64,
}

impl Peer {
    fn alive(&self) -> bool {
        self.writer.is_some()
    }
}

struct GradBarrier {
    keys: Vec<(usize, u32, u64)>,
    got: Vec<(usize, Tensor)>,
    since: Instant,
}

/// What a finished loop hands back.
#[derive(Debug)]
pub struct ServerOutcome {
    pub body: ServerBody,
    pub stats: ServerStats,
}

/// Event loop owning one server body and the sessions of its clients.
pub struct ServerLoop {
    cfg: Arc<RunConfig>,
    mode: LoopMode,
    body: ServerBody,
    opt: Adam,
    peers: Vec<Peer>,
    incoming: Incoming,
    rng: ChaCha8Rng,
    fwd_queue: Vec<(usize, u64, Tensor)>,
    fwd_since: Option<Instant>,
    grad_wait: Option<GradBarrier>,
    sync_wait: Vec<(usize, u64, ParamSet)>,
    rendezvous: Option<Arc<Rendezvous>>,
    left_rendezvous: bool,
    capture: Option<BufWriter<File>>,
    stats: ServerStats,
}

impl ServerLoop {
    pub fn new(cfg: Arc<RunConfig>, mode: LoopMode, body: ServerBody, conns: Vec<Connection>, replica: u64) -> Result<Self> {
        let incoming = Incoming::new();
        let mut peers = Vec::with_capacity(conns.len());
        for (i, c) in conns.into_iter().enumerate() {
            let (reader, writer) = c.split();
            incoming.add(i, reader);
            peers.push(Peer {
                client_id: None,
                writer: Some(writer),
                cipher: None,
                last_round: 0,
            });
        }
        let capture = match &cfg.capture {
            Some(p) => Some(BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        Ok(Self {
            opt: Adam::new(cfg.optimizer),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "server-keys", replica)),
            cfg,
            mode,
            body,
            peers,
            incoming,
            fwd_queue: Vec::new(),
            fwd_since: None,
            grad_wait: None,
            sync_wait: Vec::new(),
            rendezvous: None,
            left_rendezvous: false,
            capture,
            stats: ServerStats::default(),
        })
    }

    /// Averages client parts and this body through a rendezvous shared with
    /// other replicas instead of locally.
    pub fn with_rendezvous(mut self, rv: Arc<Rendezvous>) -> Self {
        self.rendezvous = Some(rv);
        self
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.straggler_timeout_ms)
    }

    fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.peers.len()).filter(|&i| self.peers[i].alive())
    }

    /// Runs until every client connection has closed.
    pub fn run(mut self) -> Result<ServerOutcome> {
        let r = self.run_inner();
        self.leave_rendezvous();
        if let Some(c) = self.capture.as_mut() {
            c.flush()?;
        }
        r?;
        self.body.clear_cache();
        Ok(ServerOutcome {
            body: self.body,
            stats: self.stats,
        })
    }

    fn run_inner(&mut self) -> Result<()> {
        while self.alive().next().is_some() {
            let deadline = self.deadline();
            let wait = deadline.map(|d| d.saturating_duration_since(Instant::now()));
            match self.incoming.recv(wait) {
                Err(Error::Timeout(_)) => {}
                Err(e) => return Err(e),
                Ok((i, Err(e))) => self.drop_peer(i, &e),
                Ok((i, Ok(msg))) => {
                    if let Err(e) = self.handle(i, msg) {
                        self.on_error(i, e)?;
                    }
                }
            }
            self.progress()?;
        }
        Ok(())
    }

    fn on_error(&mut self, i: usize, e: Error) -> Result<()> {
        match e {
            Error::StaleRound { client_id, round } => {
                log::info!("client {client_id}: round {round} is stale, telling the client to skip it");
                self.stats.aborted_rounds += 1;
                self.send(
                    i,
                    &Message::ProtocolError {
                        code: codes::STALE_ROUND,
                        detail: format!("round {round} was aborted"),
                    },
                );
                Ok(())
            }
            e if e.is_protocol() || matches!(e, Error::Shape { .. }) => {
                self.reject(i, &e);
                Ok(())
            }
            e => Err(e),
        }
    }

    fn deadline(&self) -> Option<Instant> {
        let fwd = match (&self.grad_wait, self.fwd_since) {
            (None, Some(t)) => Some(t + self.timeout()),
            _ => None,
        };
        let grad = self.grad_wait.as_ref().map(|g| g.since + self.timeout());
        fwd.into_iter().chain(grad).min()
    }

    fn send(&mut self, i: usize, m: &Message) {
        let Some(w) = self.peers[i].writer.as_mut() else { return };
        let r = m.encode().and_then(|f| w.write_frame(&f));
        if let Err(e) = r {
            self.drop_peer(i, &e);
        }
    }

    fn reject(&mut self, i: usize, e: &Error) {
        log::warn!("rejecting client {:?}: {e}", self.peers[i].client_id);
        self.stats.rejected_peers += 1;
        self.send(
            i,
            &Message::ProtocolError {
                code: codes::of(e),
                detail: e.to_string(),
            },
        );
        self.drop_peer(i, e);
    }

    fn drop_peer(&mut self, i: usize, e: &Error) {
        let p = &mut self.peers[i];
        if let Some(mut w) = p.writer.take() {
            w.close();
            match e {
                Error::Disconnected(_) => log::info!("client {:?} disconnected", p.client_id),
                e => log::warn!("client {:?} lost: {e}", p.client_id),
            }
        }
        p.cipher = None;
        self.fwd_queue.retain(|(j, _, _)| *j != i);
        self.sync_wait.retain(|(j, _, _)| *j != i);
        if self.alive().next().is_none() {
            self.leave_rendezvous();
        }
    }

    fn leave_rendezvous(&mut self) {
        if let (Some(rv), false) = (&self.rendezvous, self.left_rendezvous) {
            rv.leave();
            self.left_rendezvous = true;
        }
    }

    fn sealing(&mut self, i: usize) -> Option<&mut SessionCipher> {
        match self.cfg.payload {
            PayloadMode::Sealed => self.peers[i].cipher.as_mut(),
            PayloadMode::Plain => None,
        }
    }

    fn client_id(&self, i: usize) -> Result<u32> {
        self.peers[i]
            .client_id
            .ok_or_else(|| Error::Protocol("message before Hello".into()))
    }

    fn unpack(&mut self, i: usize, w: &WireTensor, kind: &str, n: u64) -> Result<Tensor> {
        let ctx = aad(kind, self.client_id(i)?, n);
        if self.cfg.payload == PayloadMode::Sealed && self.peers[i].cipher.is_none() {
            return Err(Error::Crypto("no session key".into()));
        }
        w.unpack(self.sealing(i), &ctx)
    }

    fn pack(&mut self, i: usize, t: &Tensor, kind: &str, n: u64) -> Result<WireTensor> {
        let ctx = aad(kind, self.client_id(i)?, n);
        let dtype = self.cfg.wire_dtype;
        WireTensor::pack(t, dtype, self.sealing(i), &ctx)
    }

    fn handle(&mut self, i: usize, msg: Message) -> Result<()> {
        match msg {
            Message::Hello { client_id, public_key } => {
                if let Some(known) = self.peers[i].client_id {
                    if known != client_id {
                        return Err(Error::Protocol(format!("client {known} re-keyed as {client_id}")));
                    }
                } else if self.peers.iter().any(|p| p.alive() && p.client_id == Some(client_id)) {
                    return Err(Error::Protocol(format!("client id {client_id} already connected")));
                }
                let pk = RsaPublicKey::from_bytes(&public_key)?;
                let (wrapped, cipher) = accept_handshake(&pk, &mut self.rng)?;
                self.peers[i].client_id = Some(client_id);
                self.peers[i].cipher = Some(cipher);
                self.stats.handshakes += 1;
                self.send(
                    i,
                    &Message::KeyAccept {
                        wrapped_session_key: wrapped,
                    },
                );
                Ok(())
            }
            Message::SmashedData { client_id, round, tensor } => {
                let cid = self.client_id(i)?;
                if cid != client_id {
                    return Err(Error::Protocol(format!("client {cid} sent smashed data as {client_id}")));
                }
                if round <= self.peers[i].last_round {
                    return Err(Error::Protocol(format!(
                        "round {round} does not advance past {}",
                        self.peers[i].last_round
                    )));
                }
                self.peers[i].last_round = round;
                let h0 = self.unpack(i, &tensor, "smashed", round)?;
                if let Some(c) = self.capture.as_mut() {
                    wire::write_capture_record(c, &h0)?;
                }
                match self.mode {
                    LoopMode::Immediate => {
                        let h = self.body.forward(cid, round, &h0)?;
                        self.stats.body_passes += 1;
                        self.stats.max_stack = self.stats.max_stack.max(1);
                        let tensor = self.pack(i, &h, "activation", round)?;
                        self.send(i, &Message::ActivationReturn { round, tensor });
                    }
                    LoopMode::Stacked => {
                        self.fwd_queue.push((i, round, h0));
                        self.fwd_since.get_or_insert_with(Instant::now);
                    }
                }
                Ok(())
            }
            Message::GradientUpload { round, tensor } => {
                let cid = self.client_id(i)?;
                let g = self.unpack(i, &tensor, "grad-up", round)?;
                match self.mode {
                    LoopMode::Immediate => {
                        let (g0, grads) = self.body.backward(cid, round, &g)?;
                        self.body.apply_grads(&grads)?;
                        self.opt.step(&mut self.body, 1.0);
                        self.stats.updates += 1;
                        let tensor = self.pack(i, &g0, "grad-down", round)?;
                        self.send(i, &Message::GradientReturn { round, tensor });
                    }
                    LoopMode::Stacked => {
                        let expected = self.grad_wait.as_ref().is_some_and(|b| {
                            b.keys.iter().any(|k| k.0 == i && k.2 == round) && !b.got.iter().any(|(j, _)| *j == i)
                        });
                        if !expected {
                            return Err(Error::StaleRound { client_id: cid, round });
                        }
                        self.grad_wait.as_mut().expect("checked").got.push((i, g));
                    }
                }
                Ok(())
            }
            Message::ParamSync { param_set_id, blob } => {
                let cid = self.client_id(i)?;
                let ctx = aad("params-up", cid, param_set_id);
                let blob = match self.sealing(i) {
                    Some(c) => c.open(&blob, &ctx)?,
                    None => blob,
                };
                let set = wire::decode_param_set(&blob)?;
                match self.rendezvous.clone() {
                    Some(rv) => {
                        let body_set = if self.cfg.averaging.average_server_replicas {
                            self.body.snapshot(true)
                        } else {
                            ParamSet::default()
                        };
                        let avg = rv.contribute(cid, set, body_set)?;
                        if self.cfg.averaging.average_server_replicas {
                            self.body.load(&avg.1)?;
                            if self.cfg.averaging.reset_optimizer {
                                self.opt.reset();
                            }
                        }
                        self.stats.syncs += 1;
                        self.reply_params(i, param_set_id, &avg.0)
                    }
                    None => {
                        self.sync_wait.push((i, param_set_id, set));
                        Ok(())
                    }
                }
            }
            other => Err(Error::Protocol(format!("clients may not send {}", other.name()))),
        }
    }

    fn reply_params(&mut self, i: usize, id: u64, set: &ParamSet) -> Result<()> {
        let cid = self.client_id(i)?;
        let blob = wire::encode_param_set(set)?;
        let ctx = aad("params-down", cid, id);
        let blob = match self.sealing(i) {
            Some(c) => c.seal(&blob, &ctx)?,
            None => blob,
        };
        self.send(
            i,
            &Message::ParamSync {
                param_set_id: id,
                blob,
            },
        );
        Ok(())
    }

    fn progress(&mut self) -> Result<()> {
        if self.mode == LoopMode::Stacked {
            self.try_forward()?;
            self.try_backward()?;
        }
        self.try_sync()
    }

    fn waiting_on(&self, i: usize) -> bool {
        self.fwd_queue.iter().any(|(j, _, _)| *j == i) || self.sync_wait.iter().any(|(j, _, _)| *j == i)
    }

    fn try_forward(&mut self) -> Result<()> {
        if self.grad_wait.is_some() || self.fwd_queue.is_empty() {
            return Ok(());
        }
        let all_in = self.alive().all(|i| self.waiting_on(i));
        let late = self.fwd_since.is_some_and(|t| t.elapsed() >= self.timeout());
        if !all_in && !late {
            return Ok(());
        }
        if late && !all_in {
            log::warn!("straggler deadline passed; stacking {} of the live clients", self.fwd_queue.len());
        }
        let mut queue = std::mem::take(&mut self.fwd_queue);
        self.fwd_since = None;
        queue.sort_by_key(|(i, _, _)| self.peers[*i].client_id);
        let keys: Vec<(usize, u32, u64)> = queue
            .iter()
            .map(|(i, r, _)| (*i, self.peers[*i].client_id.expect("handshaken"), *r))
            .collect();
        let inputs: Vec<(u32, u64, Tensor)> = queue.into_iter().map(|(i, r, h)| (keys_cid(&keys, i), r, h)).collect();
        let outs = match self.body.forward_stacked(&inputs) {
            Ok(o) => o,
            Err(e) if e.is_protocol() || matches!(e, Error::Shape { .. }) => {
                for (i, _, _) in &keys {
                    self.reject(*i, &e);
                }
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        self.stats.body_passes += 1;
        self.stats.max_stack = self.stats.max_stack.max(keys.len());
        for ((i, _, r), h) in keys.iter().zip(outs) {
            let tensor = self.pack(*i, &h, "activation", *r)?;
            self.send(*i, &Message::ActivationReturn { round: *r, tensor });
        }
        self.grad_wait = Some(GradBarrier {
            keys,
            got: Vec::new(),
            since: Instant::now(),
        });
        Ok(())
    }

    fn try_backward(&mut self) -> Result<()> {
        let Some(b) = &self.grad_wait else { return Ok(()) };
        let complete = b
            .keys
            .iter()
            .all(|k| !self.peers[k.0].alive() || b.got.iter().any(|(j, _)| *j == k.0));
        let late = b.since.elapsed() >= self.timeout();
        if !complete && !late {
            return Ok(());
        }
        let b = self.grad_wait.take().expect("checked");
        for k in &b.keys {
            if self.peers[k.0].alive() && !b.got.iter().any(|(j, _)| *j == k.0) {
                log::warn!("client {} missed the gradient deadline for round {}", k.1, k.2);
            }
        }
        if b.got.is_empty() {
            self.body.clear_cache();
            return Ok(());
        }
        let grads: Vec<(u32, u64, Tensor)> = b
            .keys
            .iter()
            .filter_map(|k| b.got.iter().find(|(j, _)| *j == k.0).map(|(_, g)| (k.1, k.2, g.clone())))
            .collect();
        let n = grads.len();
        let (g0s, map) = self.body.backward_stacked(&grads)?;
        self.body.apply_grads(&map)?;
        let scale = if self.cfg.mean_client_batch_gradients {
            1.0 / n as f64
        } else {
            1.0
        };
        self.opt.step(&mut self.body, scale);
        self.stats.updates += 1;
        for ((cid, r, _), g0) in grads.iter().zip(g0s) {
            let i = b.keys.iter().find(|k| k.1 == *cid).expect("key present").0;
            let tensor = self.pack(i, &g0, "grad-down", *r)?;
            self.send(i, &Message::GradientReturn { round: *r, tensor });
        }
        Ok(())
    }

    fn try_sync(&mut self) -> Result<()> {
        if self.sync_wait.is_empty() || self.grad_wait.is_some() || !self.fwd_queue.is_empty() {
            return Ok(());
        }
        if !self.alive().all(|i| self.sync_wait.iter().any(|(j, _, _)| *j == i)) {
            return Ok(());
        }
        let mut wait = std::mem::take(&mut self.sync_wait);
        let id = wait[0].1;
        if let Some(pos) = wait.iter().position(|(_, p, _)| *p != id) {
            let (i, other, _) = wait.remove(pos);
            self.sync_wait = wait;
            self.reject(i, &Error::Protocol(format!("parameter sync {other} while others sync {id}")));
            return Ok(());
        }
        wait.sort_by_key(|(i, _, _)| self.peers[*i].client_id);
        let sets: Vec<ParamSet> = wait.iter().map(|(_, _, s)| s.clone()).collect();
        let avg = match fed_average(&sets) {
            Ok(a) => a,
            Err(e) => {
                let e = Error::Protocol(format!("client parameter sets disagree: {e}"));
                for (i, _, _) in &wait {
                    self.reject(*i, &e);
                }
                return Ok(());
            }
        };
        self.stats.syncs += 1;
        for (i, _, _) in &wait {
            self.reply_params(*i, id, &avg)?;
        }
        Ok(())
    }
}

fn keys_cid(keys: &[(usize, u32, u64)], i: usize) -> u32 {
    keys.iter().find(|k| k.0 == i).expect("key present").1
}
