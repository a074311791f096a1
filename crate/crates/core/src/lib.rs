//! Belief-space roadmaps whose edges are output-feedback covariance steering
//! controllers.
//!
//! Nodes are Gaussian beliefs `(x̄, P̂₋, P̃₋)`; every edge carries a mean
//! control, a causal feedback gain on the filtered state, and the Kalman
//! filter that runs with it, designed so that executing the edge from its
//! source node lands inside the destination node's covariances.

pub mod cli;
pub mod cnt;
pub mod error;
pub mod estimation;
pub mod export;
pub mod linalg;
pub mod roadmap;
pub mod rng;
pub mod scenario;
pub mod steering;
pub mod sysmodels;

pub use error::{Error, Result};
