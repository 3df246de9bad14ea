//! Minimal dense-tensor math for training small transformers on a CPU.
//!
//! Everything is `f64`. Models build a fresh [`Graph`] per forward pass,
//! call [`Graph::backward`] on a scalar loss, move gradients into their
//! [`Param`]s and hand those to [`AdamW`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
mod tensor;

pub use checkpoint::{decode_weights, encode_weights, load_weights, save_weights};
pub use error::{NumericsError, Result};
pub use graph::{Graph, Param, ParamId, Var};
pub use optim::{clip_grad_norm, cosine_lr, grad_norm, zero_grads, AdamW, AdamWConfig};
pub use tensor::{cross_entropy, logsumexp, Tensor};
