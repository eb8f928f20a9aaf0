//! Multi-stream multi-task dense prediction with pluggable loss combination.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff graph
//! - [`losses`]: per-task losses and metrics
//! - [`combiners`]: strategies that merge per-task losses into one scalar
//! - [`network`]: shared siamese encoder, feature aggregation, task heads
//! - [`data`]: seeded synthetic frame pairs and their on-disk format
//! - [`training`]: optimizers, the training loop, evaluation and metrics

pub mod combiners;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use task::Task;
