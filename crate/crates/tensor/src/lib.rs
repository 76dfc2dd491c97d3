//! Minimal dense tensors with a reverse-mode autodiff tape.
//!
//! Everything the retrieval models need and nothing more: 2-D matmul through
//! `matrixmultiply`, row-wise softmax and layer norm, a fused multi-head
//! attention with causal and key-padding masks, dropout, embeddings and the
//! handful of reductions used by the losses. The engine is generic over
//! [`Scalar`] so the same op code runs in `f32` for training and in `f64`
//! for finite-difference checks.

mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{AttentionSpec, Grads, Graph, Var};
pub use optim::{lr_at_step, Adam, AdamConfig, Schedule, ScheduleSpec};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
