//! Deterministic federated-learning simulator built on a small dense-network
//! engine. Implements consensus-oriented data generation with knowledge
//! distillation alongside FedAvg, FedProx, FedAvgM and SCAFFOLD baselines,
//! with optional pairwise-mask secure aggregation.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod generation;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainers;
pub mod util;

pub use error::{Error, Result};
