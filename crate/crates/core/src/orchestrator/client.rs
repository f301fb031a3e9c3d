use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{derive_seed, RunConfig};
use super::metrics::{ClientSummary, StepRecord};
use super::partition::Sampler;
use super::{aad, codes};
use crate::crypto::{ClientHandshake, PayloadMode, SessionCipher};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::split::ClientParts;
use crate::tensor::{Adam, Tensor};
use crate::transport::{wire, Connection, Message, WireTensor};

/// One client's run state: its model parts, optimizer, shard sampler and
/// encrypted session with the server. Labels and token ids stay here.
#[derive(Debug)]
pub struct ClientSession {
    pub client_id: u32,
    cfg: Arc<RunConfig>,
    parts: ClientParts,
    opt: Adam,
    data: Arc<Dataset>,
    sampler: Sampler,
    conn: Option<Connection>,
    cipher: Option<SessionCipher>,
    key_rng: ChaCha8Rng,
    round: u64,
    steps: u64,
    handshakes: u64,
    started: Instant,
    records: Vec<StepRecord>,
    error: Option<String>,
}

impl ClientSession {
    pub fn new(
        cfg: Arc<RunConfig>,
        client_id: u32,
        mut parts: ClientParts,
        data: Arc<Dataset>,
        shard: Vec<usize>,
        conn: Connection,
        started: Instant,
    ) -> Result<Self> {
        parts.front.client_id = client_id;
        let sampler = Sampler::new(shard, cfg.batch_size, cfg.seed)?;
        Ok(Self {
            client_id,
            opt: Adam::new(cfg.optimizer),
            key_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "client-keys", u64::from(client_id))),
            cfg,
            parts,
            data,
            sampler,
            conn: Some(conn),
            cipher: None,
            round: 0,
            steps: 0,
            handshakes: 0,
            started,
            records: Vec::new(),
            error: None,
        })
    }

    pub fn is_alive(&self) -> bool {
        self.conn.is_some()
    }

    pub fn parts(&self) -> &ClientParts {
        &self.parts
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn conn(&mut self) -> Result<&mut Connection> {
        self.conn
            .as_mut()
            .ok_or_else(|| Error::Disconnected(format!("client {} session is closed", self.client_id)))
    }

    fn send(&mut self, m: &Message) -> Result<()> {
        self.conn()?.send(m)
    }

    fn recv(&mut self) -> Result<Message> {
        match self.conn()?.recv()? {
            Message::ProtocolError { code, detail } if code != codes::STALE_ROUND => {
                Err(Error::Protocol(format!("server rejected the session (code {code}): {detail}")))
            }
            m => Ok(m),
        }
    }

    fn sealing(&mut self) -> Option<&mut SessionCipher> {
        match self.cfg.payload {
            PayloadMode::Sealed => self.cipher.as_mut(),
            PayloadMode::Plain => None,
        }
    }

    /// Sends a fresh RSA public key and installs the session key the server
    /// returns. Runs at connect time and whenever rotation is due.
    pub fn handshake(&mut self) -> Result<()> {
        let hs = ClientHandshake::new(self.cfg.key_bits, &mut self.key_rng)?;
        let hello = Message::Hello {
            client_id: self.client_id,
            public_key: hs.public.to_bytes(),
        };
        self.send(&hello)?;
        match self.recv()? {
            Message::KeyAccept { wrapped_session_key } => {
                self.cipher = Some(hs.finish(&wrapped_session_key)?);
                self.handshakes += 1;
                Ok(())
            }
            other => Err(unexpected("KeyAccept", &other)),
        }
    }

    /// Initial handshake; a failure drops the session.
    pub fn connect(&mut self) -> Result<()> {
        self.handshake().map_err(|e| self.fail(e))
    }

    /// Ends the session without marking it failed.
    pub fn close(&mut self) {
        self.conn = None;
    }

    fn pack(&mut self, t: &Tensor, kind: &str, n: u64) -> Result<WireTensor> {
        let dtype = self.cfg.wire_dtype;
        let ctx = aad(kind, self.client_id, n);
        WireTensor::pack(t, dtype, self.sealing(), &ctx)
    }

    fn unpack(&mut self, w: &WireTensor, kind: &str, n: u64) -> Result<Tensor> {
        let ctx = aad(kind, self.client_id, n);
        w.unpack(self.sealing(), &ctx)
    }

    /// One protocol round. Returns the loss, or `None` if the server aborted
    /// the round (the update is then skipped).
    pub fn step(&mut self) -> Result<Option<f64>> {
        if let Some(f) = self.cfg.fault {
            if f.client_id == self.client_id && self.steps >= f.after_steps {
                return Err(Error::Disconnected(format!("client {} dropped by fault injection", self.client_id)));
            }
        }
        self.round += 1;
        let r = self.round;
        if self.cfg.rotation.due(r) {
            self.handshake()?;
        }
        let idx = self.sampler.next_batch();
        let (tokens, targets) = self.data.batch(&idx)?;
        let h0 = self.parts.front.forward(&tokens, r)?;
        let tensor = self.pack(&h0, "smashed", r)?;
        self.send(&Message::SmashedData {
            client_id: self.client_id,
            round: r,
            tensor,
        })?;
        let h = match self.recv()? {
            Message::ActivationReturn { round, tensor } if round == r => self.unpack(&tensor, "activation", r)?,
            other => return Err(unexpected("ActivationReturn", &other)),
        };
        let (loss, g) = self.parts.tail.forward_loss(&h, &targets)?;
        let tensor = self.pack(&g, "grad-up", r)?;
        self.send(&Message::GradientUpload { round: r, tensor })?;
        let g0 = match self.recv()? {
            Message::GradientReturn { round, tensor } if round == r => self.unpack(&tensor, "grad-down", r)?,
            Message::ProtocolError { .. } => {
                log::info!("client {}: round {r} aborted by the server", self.client_id);
                self.parts.zero_grads();
                return Ok(None);
            }
            other => return Err(unexpected("GradientReturn", &other)),
        };
        self.parts.front.backward(r, &g0)?;
        self.opt.step(&mut self.parts, 1.0);
        self.steps += 1;
        self.records.push(StepRecord {
            step: self.steps,
            round: r,
            client_id: self.client_id,
            loss,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(Some(loss))
    }

    /// Runs `rounds` rounds; on error the connection is closed so the
    /// server stops waiting for this client.
    pub fn run_rounds(&mut self, rounds: u64, stop: &dyn Fn() -> bool) -> Result<()> {
        for _ in 0..rounds {
            if stop() {
                return Ok(());
            }
            if let Err(e) = self.step() {
                return Err(self.fail(e));
            }
        }
        Ok(())
    }

    /// Uploads the trainable client parameters for averaging.
    pub fn send_params(&mut self, period: u64) -> Result<()> {
        let r = (|| {
            let blob = wire::encode_param_set(&self.parts.snapshot(true))?;
            let ctx = aad("params-up", self.client_id, period);
            let blob = match self.sealing() {
                Some(c) => c.seal(&blob, &ctx)?,
                None => blob,
            };
            self.send(&Message::ParamSync {
                param_set_id: period,
                blob,
            })
        })();
        r.map_err(|e| self.fail(e))
    }

    /// Waits for the averaged parameters and loads them.
    pub fn recv_params(&mut self, period: u64) -> Result<()> {
        let r = (|| {
            let blob = match self.recv()? {
                Message::ParamSync { param_set_id, blob } if param_set_id == period => blob,
                other => return Err(unexpected("ParamSync", &other)),
            };
            let ctx = aad("params-down", self.client_id, period);
            let blob = match self.sealing() {
                Some(c) => c.open(&blob, &ctx)?,
                None => blob,
            };
            self.parts.load(&wire::decode_param_set(&blob)?)?;
            if self.cfg.averaging.reset_optimizer {
                self.opt.reset();
            }
            Ok(())
        })();
        r.map_err(|e| self.fail(e))
    }

    fn fail(&mut self, e: Error) -> Error {
        log::warn!("client {} dropped: {e}", self.client_id);
        self.error = Some(e.to_string());
        self.conn = None;
        e
    }

    /// Closes the connection and returns the parts, records and summary.
    pub fn finish(mut self) -> (ClientParts, Vec<StepRecord>, ClientSummary) {
        let dropped = self.error.is_some();
        self.conn = None;
        let summary = ClientSummary {
            client_id: self.client_id,
            steps: self.steps,
            rounds: self.round,
            handshakes: self.handshakes,
            dropped,
            error: self.error,
        };
        (self.parts, self.records, summary)
    }
}

fn unexpected(want: &str, got: &Message) -> Error {
    match got {
        Message::ProtocolError { code, detail } => {
            Error::Protocol(format!("expected {want}, server sent error {code}: {detail}"))
        }
        m => Error::Protocol(format!("expected {want}, got {}", m.name())),
    }
}
