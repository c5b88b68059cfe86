//! moelab: a desk-scale, fully deterministic training lab for sparse
//! mixture-of-experts models.
//!
//! The crate is organized around six modules:
//!
//! - [`schedule`]: temperature rescaling of task sampling distributions and
//!   the epoch-wise temperature heating schedule.
//! - [`routing`]: balanced capacitated token-to-expert assignment (exact
//!   solver), greedy argmax routing, and a brute-force oracle for tests.
//! - [`nn`]: a micro feed-forward network with hand-written gradients,
//!   sigmoid-gated expert blocks, and the dense-to-sparse conversion.
//! - [`data`]: a deterministic synthetic multi-task cipher corpus with a
//!   Zipfian task-size distribution and temperature-weighted batch sampling.
//! - [`trainer`]: the two-phase training loop (dense pre-training, then
//!   sparse training) with validation, metrics, and expert-usage tracking.
//! - [`cli`]: the command-line surface tying everything into reproducible
//!   experiments.

pub mod cli;
pub mod data;
mod error;
pub mod nn;
pub mod routing;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
