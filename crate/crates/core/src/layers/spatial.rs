use super::dropout::{apply, sample_mask};
use super::{KeepProb, Phase};
use crate::error::{Error, Result};
use crate::stats::{FeatureBatch, RandomSeed};

/// Feature maps laid out as `batch × channels × spatial` (spatial = flattened H·W).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureBatch {
    data: Vec<f64>,
    batch_size: usize,
    channels: usize,
    spatial_size: usize,
}

impl SpatialFeatureBatch {
    pub fn new(batch_size: usize, channels: usize, spatial_size: usize, data: Vec<f64>) -> Result<Self> {
        if batch_size == 0 || channels == 0 || spatial_size == 0 {
            return Err(Error::Domain(format!(
                "spatial batch dimensions must be positive, got {batch_size}×{channels}×{spatial_size}"
            )));
        }
        if data.len() != batch_size * channels * spatial_size {
            return Err(Error::shape(
                format!("{} values", batch_size * channels * spatial_size),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(SpatialFeatureBatch {
            data,
            batch_size,
            channels,
            spatial_size,
        })
    }

    /// Reinterprets a flat `batch × (channels·spatial)` feature batch.
    pub fn from_flat(x: FeatureBatch, channels: usize) -> Result<Self> {
        if channels == 0 || !x.width().is_multiple_of(channels) {
            return Err(Error::shape(
                format!("width divisible by {channels} channels"),
                format!("width {}", x.width()),
            ));
        }
        let spatial = x.width() / channels;
        let batch = x.batch_size();
        Ok(SpatialFeatureBatch {
            data: x.into_vec(),
            batch_size: batch,
            channels,
            spatial_size: spatial,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial_size(&self) -> usize {
        self.spatial_size
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SpatialFeatureBatch {
        SpatialFeatureBatch {
            data: self.data.iter().map(|&v| f(v)).collect(),
            batch_size: self.batch_size,
            channels: self.channels,
            spatial_size: self.spatial_size,
        }
    }

    /// Reorders channels: output channel `c` is input channel `perm[c]`.
    pub fn permute_channels(&self, perm: &[usize]) -> SpatialFeatureBatch {
        assert_eq!(perm.len(), self.channels);
        let s = self.spatial_size;
        let mut data = Vec::with_capacity(self.data.len());
        for sample in self.data.chunks_exact(self.channels * s) {
            for &c in perm {
                data.extend_from_slice(&sample[c * s..(c + 1) * s]);
            }
        }
        SpatialFeatureBatch {
            data,
            batch_size: self.batch_size,
            channels: self.channels,
            spatial_size: s,
        }
    }
}

/// Global average pooling: per sample and channel, the mean over spatial positions.
pub fn gap_forward(x: &SpatialFeatureBatch) -> FeatureBatch {
    let s = x.spatial_size as f64;
    let data = x
        .data
        .chunks_exact(x.spatial_size)
        .map(|c| c.iter().sum::<f64>() / s)
        .collect();
    FeatureBatch::from_parts(x.batch_size, x.channels, data)
}

/// Inverted dropout with an independent mask bit per (sample, channel, position).
pub fn spatial_dropout_elementwise(
    x: &SpatialFeatureBatch,
    p: KeepProb,
    phase: Phase,
    seed: RandomSeed,
) -> SpatialFeatureBatch {
    match phase {
        Phase::Test => x.clone(),
        Phase::Train => {
            let mask = sample_mask(x.batch_size, x.channels * x.spatial_size, p, seed);
            SpatialFeatureBatch {
                data: apply(&x.data, mask.bits(), p),
                batch_size: x.batch_size,
                channels: x.channels,
                spatial_size: x.spatial_size,
            }
        }
    }
}
