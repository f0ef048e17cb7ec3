//! Simulator for prototype-based federated fine-tuning across heterogeneous
//! domains.
//!
//! A synthetic federation of clients, one per domain, shares a frozen
//! encoder and a fixed classification head. Clients upload class
//! prototypes of their embeddings; the server trains a small adapter on
//! the pooled prototypes. Baselines (local training, FedAvg, FedProx and
//! prototype averaging) run on the same world for comparison.

pub mod adapter;
pub mod attack;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod prototype;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
