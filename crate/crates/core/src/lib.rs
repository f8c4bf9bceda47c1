//! Federated-learning poisoning laboratory.
//!
//! Clean-label sampling attacks (hard-sample pools and an RL-driven
//! Gaussian meta-sampler), baseline poisoning attacks, Byzantine-robust
//! aggregation rules, anomaly-detection defenses, an FL round simulator,
//! and diagnostics that check the theory behind sample-order attacks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod analysis;
pub mod baselines;
pub mod dataio;
pub mod detect;
pub mod error;
pub mod metasampler;
pub mod models;
pub mod numkit;
pub mod sampling;
pub mod simulator;

pub use error::{Error, Result};
