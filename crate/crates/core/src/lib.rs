//! Online SGD for multi-spiked tensor PCA on the Stiefel manifold, the
//! deterministic dynamics of its correlations, and tools to classify how and
//! in which order the spikes are recovered.

pub mod analysis;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod population;
pub mod rng;
pub mod sgd;
pub mod stiefel;

pub use error::{Error, Result};
