//! Generative retrieval over semantic identifiers.
//!
//! The pipeline turns item embeddings into short coarse-fine identifiers,
//! trains an encoder-decoder model with coarse-to-fine feature fusion to map
//! queries onto those identifiers, and retrieves with prefix-tree constrained
//! beam search.

pub mod config;
pub mod data;
pub mod decode;
pub mod eval;
pub mod gradsuite;
mod error;
pub mod ids;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod train;

pub use error::{CoreError, Result};
pub use par::Exec;
