//! Federated traffic forecasting simulator with graph-aware server aggregation.
//!
//! Each sensor is a client with its own GRU encoder-decoder. After local training the
//! server stacks client parameters into a matrix and aggregates them with uniform FedAvg,
//! neighbourhood averaging over the sensor graph, or message-passing averaging.

pub mod aggregation;
pub mod cli;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
