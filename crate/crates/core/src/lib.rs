//! Deterministic simulator for serverless federated learning in which every
//! node tracks the network-average model by dynamic average consensus.

pub mod cli;
pub mod config;
pub mod consensus;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod numfmt;
pub mod seed;

pub use error::{Error, Result};
