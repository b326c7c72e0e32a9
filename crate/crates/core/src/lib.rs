//! Cross-layer key/value sharing for decoder-only transformers.
//!
//! A [`topology::KVTopology`] decides which layers compute keys and values and
//! which layer each one attends to. [`model::Model`] runs the stack, including
//! the iterative schedule needed when a layer reads KVs from above it.
//! [`training`] and [`inference`] build on that, [`toolkit`] holds
//! checkpoints, data loading, evaluation and benchmarking.

pub mod error;
pub mod inference;
pub mod model;
pub mod numcore;
pub mod toolkit;
pub mod topology;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use model::{Iterations, Model, ModelConfig, ModelWeights};
pub use topology::{KVTopology, Partitioning, Positioning};
