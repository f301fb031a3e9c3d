//! Framed binary wire protocol and connections (in-process loopback or TCP).
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic "SFED" | version u16 | msg_type u16 | payload_len u32 | payload | crc32(payload) u32
//! ```

mod conn;
mod message;
pub mod wire;

pub use conn::{loopback_pair, Connection, FrameReader, FrameWriter, Incoming, Tap};
pub use message::{Dtype, Message, WireTensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SFED";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: usize = 1 << 30;

/// Wraps a payload into a frame.
pub fn encode_frame(msg_type: u16, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD {
        return Err(Error::Framing(format!("payload of {} bytes exceeds the frame limit", payload.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&msg_type.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    Ok(out)
}

/// Validates a frame header and returns `(msg_type, payload_len)`.
pub fn parse_header(h: &[u8]) -> Result<(u16, usize)> {
    if h.len() < HEADER_LEN {
        return Err(Error::Framing("truncated frame header".into()));
    }
    if h[..4] != MAGIC {
        return Err(Error::Framing("bad magic".into()));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != VERSION {
        return Err(Error::Framing(format!("unsupported version {version}")));
    }
    let msg_type = u16::from_le_bytes([h[6], h[7]]);
    let len = u32::from_le_bytes([h[8], h[9], h[10], h[11]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Framing(format!("declared payload of {len} bytes exceeds the frame limit")));
    }
    Ok((msg_type, len))
}

/// Splits a complete frame into `(msg_type, payload)` after checking length
/// and checksum.
pub fn decode_frame(frame: &[u8]) -> Result<(u16, &[u8])> {
    let (msg_type, len) = parse_header(frame)?;
    if frame.len() != HEADER_LEN + len + 4 {
        return Err(Error::Framing(format!(
            "frame is {} bytes but header declares {}",
            frame.len(),
            HEADER_LEN + len + 4
        )));
    }
    let payload = &frame[HEADER_LEN..HEADER_LEN + len];
    let crc = u32::from_le_bytes(frame[HEADER_LEN + len..].try_into().expect("4 bytes"));
    if crc != crc32fast::hash(payload) {
        return Err(Error::Framing("checksum mismatch".into()));
    }
    Ok((msg_type, payload))
}
