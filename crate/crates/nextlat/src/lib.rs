//! A desk-scale laboratory for next-latent prediction training.
//!
//! The crate trains decoder-only transformers with an auxiliary objective
//! that makes each hidden state predict the next hidden state through a
//! small latent-dynamics model, alongside plain next-token, multi-token,
//! and joint multi-token baselines. It ships its own reverse-mode autodiff
//! engine, deterministic synthetic benchmark generators (path-star graphs,
//! countdown arithmetic, grid-world traversals, HMM streams), and an
//! evaluation suite for belief-state and world-model quality.
//!
//! Start with the runnable examples (`cargo run --release --example ...`):
//! each major capability has one. The `nextlat` binary wraps the same
//! library entry points behind `gen`, `train`, `eval`, `probe`, `gradcheck`,
//! and `bench` subcommands.

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TokenBatch};
