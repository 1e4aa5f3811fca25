//! Continuous (real-valued) level-k driver models.
//!
//! Discrete level-k policies (learned per level by Q-learning on a toy
//! highway) become the training data of a per-state multi-output Gaussian
//! process over the level axis. Predicted policies at real-valued levels are
//! matched against observed driver action frequencies with a
//! Kolmogorov–Smirnov score searched by simulated annealing.

pub mod data;
pub mod error;
pub mod fitting;
pub mod game;
pub mod gp;
pub mod kernels;
pub mod levelk;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
pub use nalgebra;
pub use policy::Policy;

/// Identifier of a discretized environment state.
pub type StateId = u32;
