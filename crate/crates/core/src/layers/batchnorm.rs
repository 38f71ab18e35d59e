use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{batch_moments, FeatureBatch, MomentStats};

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Batch normalization with a scalar scale `gamma`, zero shift, and statistics
/// frozen at calibration time. Both phases normalize with the frozen
/// statistics; the state never changes after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
    frozen: Option<FrozenStats>,
}

impl BnState {
    pub fn uncalibrated(gamma: f64) -> Self {
        BnState {
            gamma,
            beta: 0.0,
            epsilon: BN_EPSILON,
            frozen: None,
        }
    }

    /// Freezes the given training-phase moments.
    pub fn from_moments(stats: &MomentStats, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!("BN gamma must be positive, got {gamma}")));
        }
        Ok(BnState {
            frozen: Some(FrozenStats {
                mean: stats.mean.clone(),
                variance: stats.variance.clone(),
            }),
            ..BnState::uncalibrated(gamma)
        })
    }

    pub fn frozen(&self) -> Option<&FrozenStats> {
        self.frozen.as_ref()
    }

    pub fn is_calibrated(&self) -> bool {
        self.frozen.is_some()
    }
}

/// Calibrates on a training-phase batch. A constant input freezes a zero
/// variance; the forward pass is then governed by `epsilon`.
pub fn bn_calibrate(x_train: &FeatureBatch, gamma: f64) -> Result<BnState> {
    if x_train.batch_size() < 2 {
        return Err(Error::Domain(
            "BN calibration needs at least two samples".to_string(),
        ));
    }
    BnState::from_moments(&batch_moments(x_train), gamma)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with the frozen statistics.
pub fn bn_forward(x: &FeatureBatch, state: &BnState) -> Result<FeatureBatch> {
    let frozen = state.frozen.as_ref().ok_or(Error::Uncalibrated)?;
    if frozen.mean.len() != x.width() {
        return Err(Error::shape(
            format!("width {}", frozen.mean.len()),
            format!("width {}", x.width()),
        ));
    }
    let scale: Vec<f64> = frozen
        .variance
        .iter()
        .map(|v| state.gamma / (v + state.epsilon).sqrt())
        .collect();
    let w = x.width();
    let data = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let j = k % w;
            (v - frozen.mean[j]) * scale[j] + state.beta
        })
        .collect();
    Ok(FeatureBatch::from_parts(x.batch_size(), w, data))
}
