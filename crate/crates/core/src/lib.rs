//! Simulation of a client–edge–cloud federated learning system for
//! eye-state (fatigue) classification.
//!
//! Clients score their images with Monte Carlo dropout and upload only the
//! uncertain ones to an edge server; edges train locally and the cloud
//! aggregates edge models weighted by data size and uncertainty.

pub mod data;
pub mod error;
pub mod features;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
