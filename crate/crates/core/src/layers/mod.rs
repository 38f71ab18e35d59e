//! Phase-aware forward simulation of the layers that appear around dropout:
//! dropout itself, ReLU/ELU, linear weights, batch normalization with frozen
//! statistics, skip addition and global average pooling.

mod activation;
mod batchnorm;
mod dropout;
mod linear;
mod spatial;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::FeatureBatch;

pub use activation::{elu_forward, relu_forward};
pub use batchnorm::{bn_calibrate, bn_forward, BnState, FrozenStats, BN_EPSILON};
pub use dropout::{dropout_forward, dropout_with_mask, sample_mask, DropoutMask};
pub use linear::{he_init, linear_forward, LinearWeights};
pub use spatial::{gap_forward, spatial_dropout_elementwise, SpatialFeatureBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            other => Err(Error::Domain(format!("unknown phase `{other}`"))),
        }
    }
}

/// Dropout keep probability, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct KeepProb(f64);

impl KeepProb {
    pub fn new(p: f64) -> Result<Self> {
        if p > 0.0 && p < 1.0 {
            Ok(KeepProb(p))
        } else {
            Err(Error::KeepProbability(p))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for KeepProb {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        KeepProb::new(p)
    }
}

impl From<KeepProb> for f64 {
    fn from(p: KeepProb) -> f64 {
        p.0
    }
}

impl fmt::Display for KeepProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Elementwise sum `x + f` of the skip path and the residual branch.
pub fn skip_add(x: &FeatureBatch, f: &FeatureBatch) -> Result<FeatureBatch> {
    if x.batch_size() != f.batch_size() || x.width() != f.width() {
        return Err(Error::shape(
            format!("{}×{}", x.batch_size(), x.width()),
            format!("{}×{}", f.batch_size(), f.width()),
        ));
    }
    let data = x.as_slice().iter().zip(f.as_slice()).map(|(a, b)| a + b).collect();
    Ok(FeatureBatch::from_parts(x.batch_size(), x.width(), data))
}
