//! Federated learning simulator with a reinforcement-learning driven client.
//!
//! One "optimized" client uses a DDPG actor-critic to pick, per round and per
//! class, how much of its local training split it trains on. The remaining
//! clients train on their full split. After the federated rounds the
//! optimized client fine-tunes on all of its data until validation accuracy
//! stops improving.
//!
//! Module map:
//!
//! * [`nn`]: small MLP with analytic backprop, cross-entropy and SGD.
//! * [`data`]: synthetic blobs, Dirichlet partitioning, splits and
//!   action-partitioned subsets.
//! * [`metrics`]: confusion matrix, per-class precision/recall/F1, state vector.
//! * [`aggregation`]: FedAvg, FedAvgM, FedMedian, FedProx (server side) and a
//!   divergence-minimizing cache aggregator.
//! * [`agent`]: actor-critic, replay buffer, action transforms.
//! * [`reward`]: exponential loss-curve fit and the piecewise reward.
//! * [`orchestrator`]: the round loop, client training, fine-tuning and the
//!   performance bound.
//! * [`records`]: JSON-lines encoding of round and fine-tune records.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod aggregation;
pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod records;
pub mod reward;
pub mod seed;

pub use error::{Error, Result};
