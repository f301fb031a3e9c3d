//! RSA key establishment, sealed payloads and key rotation.

pub mod rsa;
mod session;

pub use rsa::{decrypt, encrypt, keygen, RsaPrivateKey, RsaPublicKey};
pub use session::{
    accept_handshake, ClientHandshake, KeyRotationPolicy, PayloadMode, Role, SessionCipher, SESSION_KEY_LEN,
};
