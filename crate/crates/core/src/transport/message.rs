use serde::{Deserialize, Serialize};

use super::wire::{self, Reader, Writer};
use super::{decode_frame, encode_frame};
use crate::crypto::SessionCipher;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Element width of tensor payloads on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::Protocol(format!("unknown dtype code {c}"))),
        }
    }
}

/// Tensor header in the clear plus its (usually sealed) element bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub dtype: Dtype,
    pub shape: Vec<u32>,
    pub payload: Vec<u8>,
}

impl WireTensor {
    /// Serializes `t` and seals the element bytes when a cipher is given.
    /// `aad` binds the ciphertext to its message context.
    pub fn pack(t: &Tensor, dtype: Dtype, cipher: Option<&mut SessionCipher>, aad: &[u8]) -> Result<Self> {
        let shape = wire::shape_u32(t.shape())?;
        let bytes = wire::tensor_bytes(t, dtype);
        let payload = match cipher {
            Some(c) => c.seal(&bytes, &header_aad(aad, dtype, &shape))?,
            None => bytes,
        };
        Ok(Self { dtype, shape, payload })
    }

    pub fn unpack(&self, cipher: Option<&mut SessionCipher>, aad: &[u8]) -> Result<Tensor> {
        let bytes = match cipher {
            Some(c) => c.open(&self.payload, &header_aad(aad, self.dtype, &self.shape))?,
            None => self.payload.clone(),
        };
        wire::tensor_from_bytes(&self.shape, self.dtype, &bytes)
    }

    fn write(&self, w: &mut Writer) {
        w.u8(self.dtype.code()).shape(&self.shape).bytes(&self.payload);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let dtype = Dtype::from_code(r.u8()?)?;
        let shape = r.shape()?;
        let payload = r.bytes()?.to_vec();
        Ok(Self { dtype, shape, payload })
    }
}

fn header_aad(ctx: &[u8], dtype: Dtype, shape: &[u32]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(ctx).u8(dtype.code()).shape(shape);
    w.buf
}

/// Everything that crosses a connection. None of the variants the server
/// receives carries token ids or labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, public_key: Vec<u8> },
    KeyAccept { wrapped_session_key: Vec<u8> },
    SmashedData { client_id: u32, round: u64, tensor: WireTensor },
    ActivationReturn { round: u64, tensor: WireTensor },
    GradientUpload { round: u64, tensor: WireTensor },
    GradientReturn { round: u64, tensor: WireTensor },
    ParamSync { param_set_id: u64, blob: Vec<u8> },
    Ack { round: u64 },
    ProtocolError { code: u16, detail: String },
}

impl Message {
    pub fn msg_type(&self) -> u16 {
        match self {
            Message::Hello { .. } => 1,
            Message::KeyAccept { .. } => 2,
            Message::SmashedData { .. } => 3,
            Message::ActivationReturn { .. } => 4,
            Message::GradientUpload { .. } => 5,
            Message::GradientReturn { .. } => 6,
            Message::ParamSync { .. } => 7,
            Message::Ack { .. } => 8,
            Message::ProtocolError { .. } => 9,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::KeyAccept { .. } => "KeyAccept",
            Message::SmashedData { .. } => "SmashedData",
            Message::ActivationReturn { .. } => "ActivationReturn",
            Message::GradientUpload { .. } => "GradientUpload",
            Message::GradientReturn { .. } => "GradientReturn",
            Message::ParamSync { .. } => "ParamSync",
            Message::Ack { .. } => "Ack",
            Message::ProtocolError { .. } => "ProtocolError",
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            Message::Hello { client_id, public_key } => {
                w.u32(*client_id).bytes(public_key);
            }
            Message::KeyAccept { wrapped_session_key } => {
                w.bytes(wrapped_session_key);
            }
            Message::SmashedData { client_id, round, tensor } => {
                w.u32(*client_id).u64(*round);
                tensor.write(&mut w);
            }
            Message::ActivationReturn { round, tensor }
            | Message::GradientUpload { round, tensor }
            | Message::GradientReturn { round, tensor } => {
                w.u64(*round);
                tensor.write(&mut w);
            }
            Message::ParamSync { param_set_id, blob } => {
                w.u64(*param_set_id).bytes(blob);
            }
            Message::Ack { round } => {
                w.u64(*round);
            }
            Message::ProtocolError { code, detail } => {
                w.u16(*code).bytes(detail.as_bytes());
            }
        }
        w.buf
    }

    /// Full frame bytes.
    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_frame(self.msg_type(), &self.payload())
    }

    /// Parses a full frame.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        let (msg_type, payload) = decode_frame(frame)?;
        Self::from_payload(msg_type, payload)
    }

    pub fn from_payload(msg_type: u16, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let msg = match msg_type {
            1 => Message::Hello {
                client_id: r.u32()?,
                public_key: r.bytes()?.to_vec(),
            },
            2 => Message::KeyAccept {
                wrapped_session_key: r.bytes()?.to_vec(),
            },
            3 => Message::SmashedData {
                client_id: r.u32()?,
                round: r.u64()?,
                tensor: WireTensor::read(&mut r)?,
            },
            4 => Message::ActivationReturn {
                round: r.u64()?,
                tensor: WireTensor::read(&mut r)?,
            },
            5 => Message::GradientUpload {
                round: r.u64()?,
                tensor: WireTensor::read(&mut r)?,
            },
            6 => Message::GradientReturn {
                round: r.u64()?,
                tensor: WireTensor::read(&mut r)?,
            },
            7 => Message::ParamSync {
                param_set_id: r.u64()?,
                blob: r.bytes()?.to_vec(),
            },
            8 => Message::Ack { round: r.u64()? },
            9 => Message::ProtocolError {
                code: r.u16()?,
                detail: String::from_utf8_lossy(r.bytes()?).into_owned(),
            },
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}
