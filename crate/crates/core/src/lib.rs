//! Cross-silo federated learning simulator.
//!
//! Silos train a small batch-normalized MLP regressor under one of several
//! regimes: pooled training, isolated local training, model-sharing ensembles
//! and federated averaging (FedAvg or FedBN), optionally with per-silo
//! DP-SGD and an (ε, δ) accountant.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod federation;
pub mod harness;
pub mod nncore;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
