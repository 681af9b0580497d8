//! Sheaf-regularized decentralized multimodal federated learning.
//!
//! The crate simulates a set of clients connected by a communication graph,
//! each holding a subset of input modalities. Clients gossip their modality
//! encoders with neighbours that share the modality, and couple their task
//! heads through learned restriction maps of a cellular sheaf. Baselines
//! (purely local training and decentralized SGD) run over the same data and
//! graph, and the [`metrics`] module evaluates the global objective together
//! with the descent and stationarity bounds that the algorithm is expected
//! to satisfy.

// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays are intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod sheaf;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
