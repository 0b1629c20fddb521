//! Parallel Gated Network (PGN) sequence cell and the two-branch temporal
//! forecaster built on it, together with the data, training and benchmark
//! machinery around them.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`autodiff`]: dense `f64` tensors and a define-by-run tape.
//! * [`pgn`]: the PGN cell (zero padding, sliding history extraction, one gate).
//! * [`baselines`]: sequential GRU / LSTM cells and an MLP block.
//! * [`tpgn`]: input preparation, long/short branches, the forecasting head.
//! * [`data`]: CSV ingestion, hourly aggregation, splits, windows, noise.
//! * [`train`]: Adam, early stopping, checkpoints, metrics.
//! * [`bench`]: timing / memory / MAC scenarios.

pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod data;
pub mod error;
mod kernels;
pub mod params;
pub mod pgn;
pub mod tensor;
pub mod tpgn;
pub mod train;

pub use autodiff::{finite_diff_check, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
