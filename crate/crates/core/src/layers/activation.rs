use crate::error::{Error, Result};
use crate::stats::FeatureBatch;

/// `max(0, x)` elementwise. Non-positive inputs map to `+0.0`.
pub fn relu_forward(x: &FeatureBatch) -> FeatureBatch {
    x.map(relu)
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `x` for `x > 0`, `alpha * (exp(x) - 1)` otherwise.
pub fn elu_forward(x: &FeatureBatch, alpha: f64) -> Result<FeatureBatch> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("ELU alpha must be positive, got {alpha}")));
    }
    Ok(x.map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() }))
}
