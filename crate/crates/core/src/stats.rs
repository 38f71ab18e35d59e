//! Seeded sampling and mini-batch moments.
//!
//! All variances are population variances (divide by the batch size).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A reproducible random stream: one ChaCha8 key (`seed`) and one of its
/// 2^64 independent streams (`stream_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomSeed {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        RandomSeed { seed, stream_id }
    }

    /// A child stream keyed by `tag`. Children of distinct tags are distinct
    /// streams; derivation is a pure function of `(self, tag)`.
    pub fn child(self, tag: u64) -> RandomSeed {
        RandomSeed {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    /// Convenience for a chain of tags, e.g. `(experiment, config, repetition)`.
    pub fn path(self, tags: &[u64]) -> RandomSeed {
        tags.iter().fold(self, |s, &t| s.child(t))
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A mini-batch of feature vectors, stored row-major (`batch_size × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    data: Vec<f64>,
    batch_size: usize,
    width: usize,
}

impl FeatureBatch {
    pub fn new(batch_size: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if batch_size == 0 || width == 0 {
            return Err(Error::Domain(format!(
                "batch dimensions must be positive, got {batch_size}×{width}"
            )));
        }
        if data.len() != batch_size * width {
            return Err(Error::shape(
                format!("{} values", batch_size * width),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeatureBatch {
            data,
            batch_size,
            width,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != width) {
            return Err(Error::shape(format!("rows of width {width}"), "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        FeatureBatch::new(rows.len(), width, data)
    }

    pub fn zeros(batch_size: usize, width: usize) -> Self {
        FeatureBatch::filled(batch_size, width, 0.0)
    }

    pub fn filled(batch_size: usize, width: usize, value: f64) -> Self {
        assert!(batch_size > 0 && width > 0 && value.is_finite());
        FeatureBatch {
            data: vec![value; batch_size * width],
            batch_size,
            width,
        }
    }

    /// Internal constructor for layer outputs whose shape is already known to be valid.
    pub(crate) fn from_parts(batch_size: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), batch_size * width);
        FeatureBatch {
            data,
            batch_size,
            width,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureBatch {
        FeatureBatch::from_parts(
            self.batch_size,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Per-row sums, one value per sample.
    pub fn row_sums(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().sum()).collect()
    }
}

/// Per-element mean and population variance over a mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MomentStats {
    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Mergeable per-element accumulator (count, mean, sum of squared deviations).
///
/// Chunks are reduced with the pairwise update of Chan et al., so the result
/// of merging a fixed chunk sequence is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn empty(width: usize) -> Self {
        MomentAccumulator {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    /// Two-pass moments of one chunk.
    pub fn from_batch(x: &FeatureBatch) -> Self {
        let n = x.batch_size() as f64;
        let mut mean = vec![0.0; x.width()];
        for row in x.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut m2 = vec![0.0; x.width()];
        for row in x.rows() {
            for ((s, v), m) in m2.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        MomentAccumulator {
            count: x.batch_size(),
            mean,
            m2,
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.mean.len(), other.mean.len(), "accumulator width mismatch");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// An accumulator from raw parts; `m2` holds sums of squared deviations.
    pub(crate) fn from_parts(count: usize, mean: Vec<f64>, m2: Vec<f64>) -> Self {
        debug_assert_eq!(mean.len(), m2.len());
        MomentAccumulator { count, mean, m2 }
    }

    pub fn finish(&self) -> MomentStats {
        let n = self.count.max(1) as f64;
        MomentStats {
            mean: self.mean.clone(),
            variance: self.m2.iter().map(|s| (s / n).max(0.0)).collect(),
        }
    }

    /// Merges a sequence of accumulators left to right.
    pub fn merge_all<'a>(width: usize, parts: impl IntoIterator<Item = &'a MomentAccumulator>) -> Self {
        parts.into_iter().fold(MomentAccumulator::empty(width), |mut acc, p| {
            acc.merge(p);
            acc
        })
    }
}

const MOMENT_BLOCK_ROWS: usize = 1024;

/// Draws a `batch_size × width` batch of i.i.d. `N(mean, variance)` values.
pub fn sample_gaussian(
    mean: f64,
    variance: f64,
    batch_size: usize,
    width: usize,
    seed: RandomSeed,
) -> Result<FeatureBatch> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::NegativeVariance(variance));
    }
    if !mean.is_finite() {
        return Err(Error::Domain(format!("mean must be finite, got {mean}")));
    }
    if batch_size == 0 || width == 0 {
        return Err(Error::Domain(format!(
            "batch dimensions must be positive, got {batch_size}×{width}"
        )));
    }
    let sd = variance.sqrt();
    let mut rng = seed.rng();
    let data = (0..batch_size * width)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean + sd * z
        })
        .collect();
    Ok(FeatureBatch::from_parts(batch_size, width, data))
}

/// Per-element population mean and variance.
pub fn batch_moments(x: &FeatureBatch) -> MomentStats {
    let w = x.width();
    let mut acc = MomentAccumulator::empty(w);
    for chunk in x.as_slice().chunks(MOMENT_BLOCK_ROWS * w) {
        let block = FeatureBatch::from_parts(chunk.len() / w, w, chunk.to_vec());
        acc.merge(&MomentAccumulator::from_batch(&block));
    }
    acc.finish()
}

/// Mean of the per-element variances.
pub fn pooled_variance(stats: &MomentStats) -> f64 {
    if stats.variance.is_empty() {
        return 0.0;
    }
    stats.variance.iter().sum::<f64>() / stats.variance.len() as f64
}

pub fn pooled_mean(stats: &MomentStats) -> f64 {
    if stats.mean.is_empty() {
        return 0.0;
    }
    stats.mean.iter().sum::<f64>() / stats.mean.len() as f64
}

/// Empirical second-moment matrix `E[x xᵀ]` (`width × width`, row-major).
pub fn second_moment_matrix(x: &FeatureBatch) -> Vec<f64> {
    let (c, n) = (x.batch_size(), x.width());
    let mut s = vec![0.0; n * n];
    // SAFETY: a = xᵀ viewed with strides (1, n) over the c×n row-major x,
    // b = x (c×n row-major), output n×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            n,
            c,
            n,
            1.0 / c as f64,
            x.as_slice().as_ptr(),
            1,
            n as isize,
            x.as_slice().as_ptr(),
            n as isize,
            1,
            0.0,
            s.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    // The kernel may round the two triangles differently.
    for j in 0..n {
        for k in 0..j {
            s[j * n + k] = s[k * n + j];
        }
    }
    s
}
