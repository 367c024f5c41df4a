//! Federated semi-supervised learning simulator.
//!
//! Clients hold a small labeled set and a large unlabeled set drawn with
//! Dirichlet label skew. During local training each unlabeled sample is
//! pseudo-labeled from the local model, the frozen global model, or both;
//! the SAGE rule softens confident local labels toward the global model's
//! class in proportion to how much the two models' confidences disagree.

pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod report;
pub mod seed;

pub use error::{Error, Result};
