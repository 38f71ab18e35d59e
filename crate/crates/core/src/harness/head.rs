use serde::{Deserialize, Serialize};

use super::report::{HeadRow, RepStats, SweepResult};
use super::{check_common, merged_stats, over_chunks, HEAD_STREAM};
use crate::calculus::{head_variances, relu_normal_moments};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::{dropout_forward, gap_forward, relu_forward, spatial_dropout_elementwise, KeepProb, Phase, SpatialFeatureBatch};
use crate::stats::{pooled_variance, sample_gaussian, MomentAccumulator, RandomSeed};

/// Compares `GAP(Dropout(x))` (H4) with `Dropout(GAP(x))` (H5) on the same
/// feature maps. Elements are i.i.d. `N(input_mean, input_variance)`,
/// passed through ReLU when `relu` is set; variance 0 gives a constant map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCompareConfig {
    pub channels: usize,
    pub spatial_size: usize,
    pub p: KeepProb,
    pub batch_size: usize,
    pub input_mean: f64,
    pub input_variance: f64,
    pub relu: bool,
    pub repetitions: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for HeadCompareConfig {
    fn default() -> Self {
        HeadCompareConfig {
            channels: 8,
            spatial_size: 16,
            p: KeepProb::new(0.5).unwrap(),
            batch_size: super::DEFAULT_BATCH,
            input_mean: 0.0,
            input_variance: 1.0,
            relu: true,
            repetitions: super::DEFAULT_REPETITIONS,
            seed: super::DEFAULT_SEED,
            exec: Execution::default(),
        }
    }
}

impl HeadCompareConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.repetitions)?;
        if self.channels == 0 || self.spatial_size == 0 {
            return Err(Error::Domain("channels and spatial size must be positive".to_string()));
        }
        if !(self.input_variance >= 0.0 && self.input_variance.is_finite()) {
            return Err(Error::NegativeVariance(self.input_variance));
        }
        if !self.input_mean.is_finite() {
            return Err(Error::Domain(format!("input mean must be finite, got {}", self.input_mean)));
        }
        Ok(())
    }

    /// Mean and variance of one feature-map element.
    pub fn element_moments(&self) -> Result<(f64, f64)> {
        if self.relu {
            relu_normal_moments(self.input_mean, self.input_variance)
        } else {
            Ok((self.input_mean, self.input_variance))
        }
    }
}

fn run_rep(cfg: &HeadCompareConfig, rep: usize) -> Result<(f64, f64)> {
    let root = RandomSeed::new(cfg.seed, 0).path(&[HEAD_STREAM, rep as u64]);
    let (c, s) = (cfg.channels, cfg.spatial_size);
    let accs = over_chunks(cfg.exec, cfg.batch_size, |k, rows| {
        let k = k as u64;
        let mut x = sample_gaussian(cfg.input_mean, cfg.input_variance, rows, c * s, root.path(&[1, k]))?;
        if cfg.relu {
            x = relu_forward(&x);
        }
        let x = SpatialFeatureBatch::from_flat(x, c)?;
        let h4 = gap_forward(&spatial_dropout_elementwise(&x, cfg.p, Phase::Train, root.path(&[2, k])));
        let (h5, _) = dropout_forward(&gap_forward(&x), cfg.p, Phase::Train, root.path(&[3, k]));
        Ok((MomentAccumulator::from_batch(&h4), MomentAccumulator::from_batch(&h5)))
    })?;
    let h4 = pooled_variance(&merged_stats(c, accs.iter().map(|a| &a.0)));
    let h5 = pooled_variance(&merged_stats(c, accs.iter().map(|a| &a.1)));
    Ok((h4, h5))
}

/// Train-phase output variances of the two head orderings, with the
/// closed-form values for i.i.d. elements alongside. One row.
pub fn run_head_comparison(cfg: &HeadCompareConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let reps = (0..cfg.repetitions).map(|r| run_rep(cfg, r)).collect::<Result<Vec<_>>>()?;
    let h4: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let h5: Vec<f64> = reps.iter().map(|r| r.1).collect();
    let (m, v) = cfg.element_moments()?;
    let (h4_cf, h5_cf) = head_variances(m, v, cfg.p, cfg.spatial_size)?;
    Ok(SweepResult::Head(vec![HeadRow {
        spatial_size: cfg.spatial_size,
        p: cfg.p.get(),
        channels: cfg.channels,
        input_mean: cfg.input_mean,
        input_variance: cfg.input_variance,
        relu: cfg.relu,
        var_h4: RepStats::from_samples(&h4),
        var_h5: RepStats::from_samples(&h5),
        gap: RepStats::paired_diff(&h5, &h4),
        var_h4_cf: h4_cf,
        var_h5_cf: h5_cf,
    }]))
}
