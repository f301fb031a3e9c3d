use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use super::rsa::{self, RsaPrivateKey, RsaPublicKey};
use crate::error::{Error, Result};

pub const SESSION_KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;

/// Which end of a connection a cipher belongs to. Each direction uses its own
/// nonce space so the two ends never reuse a nonce under the shared key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Client => 0,
            Role::Server => 1,
        }
    }

    fn peer(self) -> Role {
        match self {
            Role::Client => Role::Server,
            Role::Server => Role::Client,
        }
    }
}

/// Authenticated symmetric cipher for one connection. Sealed payloads are
/// `nonce (12 bytes) ‖ ciphertext+tag`; the nonce is the sender's direction
/// byte, three zero bytes and a little-endian u64 counter.
pub struct SessionCipher {
    role: Role,
    key: Zeroizing<[u8; SESSION_KEY_LEN]>,
    aead: ChaCha20Poly1305,
    sent: u64,
    last_received: Option<u64>,
}

impl std::fmt::Debug for SessionCipher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionCipher")
            .field("role", &self.role)
            .field("sent", &self.sent)
            .finish_non_exhaustive()
    }
}

impl SessionCipher {
    pub fn new(role: Role, key: [u8; SESSION_KEY_LEN]) -> Self {
        let key = Zeroizing::new(key);
        let aead = ChaCha20Poly1305::new(Key::from_slice(&key[..]));
        Self {
            role,
            key,
            aead,
            sent: 0,
            last_received: None,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Key fingerprint for logs: first four bytes of the key XOR-folded, so
    /// the key itself is never printed.
    pub fn fingerprint(&self) -> u32 {
        self.key
            .chunks(4)
            .fold(0u32, |acc, c| acc ^ u32::from_le_bytes(c.try_into().expect("4 bytes")))
    }

    fn nonce(role: Role, counter: u64) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[0] = role.tag();
        n[4..].copy_from_slice(&counter.to_le_bytes());
        n
    }

    /// Encrypts `plaintext` bound to `aad` (not transmitted).
    pub fn seal(&mut self, plaintext: &[u8], aad: &[u8]) -> Result<Vec<u8>> {
        let counter = self.sent;
        self.sent = self
            .sent
            .checked_add(1)
            .ok_or_else(|| Error::Crypto("nonce counter exhausted".into()))?;
        let nonce = Self::nonce(self.role, counter);
        let ct = self
            .aead
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
            .map_err(|_| Error::Crypto("encryption failed".into()))?;
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        Ok(out)
    }

    /// Authenticates and decrypts a payload from the peer. Nonces must come
    /// from the peer's direction and strictly increase.
    pub fn open(&mut self, sealed: &[u8], aad: &[u8]) -> Result<Vec<u8>> {
        if sealed.len() < NONCE_LEN + 16 {
            return Err(Error::Crypto("sealed payload too short".into()));
        }
        let (nonce, ct) = sealed.split_at(NONCE_LEN);
        if nonce[0] != self.role.peer().tag() || nonce[1..4] != [0, 0, 0] {
            return Err(Error::Crypto("nonce from the wrong direction".into()));
        }
        let counter = u64::from_le_bytes(nonce[4..].try_into().expect("8 bytes"));
        if self.last_received.is_some_and(|last| counter <= last) {
            return Err(Error::Crypto(format!("replayed or reordered nonce {counter}")));
        }
        let pt = self
            .aead
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
            .map_err(|_| Error::Crypto("authentication failed".into()))?;
        self.last_received = Some(counter);
        Ok(pt)
    }
}

/// Whether tensor payloads are sealed. `Plain` exists for debugging the
/// framing layer only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    #[default]
    Sealed,
    Plain,
}

/// Rounds between key regenerations; `None` never rotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyRotationPolicy {
    pub period: Option<u64>,
}

impl Default for KeyRotationPolicy {
    fn default() -> Self {
        Self { period: Some(100) }
    }
}

impl KeyRotationPolicy {
    pub fn never() -> Self {
        Self { period: None }
    }

    pub fn every(period: u64) -> Self {
        Self { period: Some(period) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == Some(0) {
            return Err(Error::Config("key rotation period must be at least 1".into()));
        }
        Ok(())
    }

    /// True when fresh keys must be in place before `round` is processed.
    pub fn due(&self, round: u64) -> bool {
        match self.period {
            Some(p) if p > 0 => round > 0 && round.is_multiple_of(p),
            _ => false,
        }
    }
}

/// Client half of the key exchange: a fresh RSA key pair whose public part
/// goes out in `Hello`; the private part unwraps the session key.
#[derive(Debug)]
pub struct ClientHandshake {
    pub public: RsaPublicKey,
    private: RsaPrivateKey,
}

impl ClientHandshake {
    pub fn new<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<Self> {
        let (public, private) = rsa::keygen(bits, rng)?;
        Ok(Self { public, private })
    }

    /// Unwraps the server's session key; the RSA key pair is dropped (and
    /// its private bytes wiped) afterwards.
    pub fn finish(self, wrapped: &[u8]) -> Result<SessionCipher> {
        let chunk = wrap_chunk_len(&self.public)?;
        let key = Zeroizing::new(rsa::decrypt_chunked(&self.private, wrapped, chunk)?);
        let key: [u8; SESSION_KEY_LEN] = key[..]
            .try_into()
            .map_err(|_| Error::Crypto("unwrapped session key has the wrong length".into()))?;
        Ok(SessionCipher::new(Role::Client, key))
    }
}

fn wrap_chunk_len(key: &RsaPublicKey) -> Result<usize> {
    let c = rsa::max_chunk_len(&key.n).min(SESSION_KEY_LEN);
    if c == 0 {
        return Err(Error::Crypto("RSA modulus too small to wrap a session key".into()));
    }
    Ok(c)
}

/// Server half: draws a random session key and RSA-encrypts it under the
/// client's public key, using the widest chunks the modulus allows.
pub fn accept_handshake<R: RngCore + ?Sized>(client_key: &RsaPublicKey, rng: &mut R) -> Result<(Vec<u8>, SessionCipher)> {
    let mut key = Zeroizing::new([0u8; SESSION_KEY_LEN]);
    rng.fill_bytes(&mut key[..]);
    let wrapped = rsa::encrypt_chunked(client_key, &key[..], wrap_chunk_len(client_key)?)?;
    Ok((wrapped, SessionCipher::new(Role::Server, *key)))
}
