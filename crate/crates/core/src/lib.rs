//! Federated learning simulator for heterogeneous clients that train
//! adaptively pruned sub-models of a shared MLP.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod selfcheck;

pub use error::{Error, Result};
