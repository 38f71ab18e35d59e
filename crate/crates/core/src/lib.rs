//! Train/test variance inconsistency of dropout.
//!
//! Layer simulators over batches of feature vectors, closed-form moment
//! calculus, Monte Carlo sweeps, and a static checker for dropout placement
//! in residual networks.

pub mod calculus;
pub mod cli;
pub mod error;
pub mod exec;
pub mod harness;
pub mod layers;
pub mod lint;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use layers::{KeepProb, Phase};
pub use stats::{FeatureBatch, MomentStats, RandomSeed};
