//! Deterministic federated-learning simulator with local batch normalization.
//!
//! The crate trains two model families over feature-shift clients — an
//! analytically differentiated two-layer normalized ReLU network, and a
//! practical dense/batch-norm MLP — under FedAvg, FedProx, FedBN, and
//! isolated-client baselines. Alongside the training engine it builds the
//! finite-width and Monte-Carlo kernel Gram matrices that govern the
//! gradient-descent dynamics, so the strategies' convergence rates can be
//! compared spectrally rather than anecdotally.
//!
//! Every run is reproducible bit-for-bit from a single seed: clients draw from
//! independent counter-based streams, reductions run in fixed index order, and
//! thread count never changes results.
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! or the `fedbn-sim` binary for the file-based experiment pipelines.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod model;
pub mod ntk;
pub mod numerics;

pub use error::{Error, Result};
