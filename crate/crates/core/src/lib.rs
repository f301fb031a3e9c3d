//! Split federated training of a small transformer language model: autograd
//! tensors, the three-way client/server model split, RSA key exchange with
//! sealed payloads, a framed wire protocol, training strategies, evaluation
//! metrics and an inversion-attack harness.

pub mod attack;
pub mod crypto;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod split;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use model::{GlmModel, ModelConfig, TokenBatch};
pub use params::{Binder, ParamSet, Parameterized};
pub use tensor::{Tape, Tensor, Var};
