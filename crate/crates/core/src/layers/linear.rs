use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::{FeatureBatch, RandomSeed};

/// A dense weight matrix (`width_out × width_in`, row-major) together with
/// the mean and variance of the distribution it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    w: Vec<f64>,
    width_out: usize,
    width_in: usize,
    pub init_mean: f64,
    pub init_variance: f64,
}

impl LinearWeights {
    /// Weights given explicitly; the init moments are the empirical entry moments.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width_in = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.is_empty() || width_in == 0 || rows.iter().any(|r| r.as_ref().len() != width_in) {
            return Err(Error::shape("non-empty rectangular weight rows", "ragged or empty rows"));
        }
        let w: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(LinearWeights {
            w,
            width_out: rows.len(),
            width_in,
            init_mean: mean,
            init_variance: var,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        LinearWeights {
            w,
            width_out: n,
            width_in: n,
            init_mean: 1.0 / n as f64,
            init_variance: (1.0 / n as f64) * (1.0 - 1.0 / n as f64),
        }
    }

    pub fn width_out(&self) -> usize {
        self.width_out
    }

    pub fn width_in(&self) -> usize {
        self.width_in
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.width_in..(i + 1) * self.width_in]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.width_in + j]
    }

    /// The same matrix with `offset` added to every entry.
    pub fn shifted(&self, offset: f64) -> LinearWeights {
        LinearWeights {
            w: self.w.iter().map(|v| v + offset).collect(),
            init_mean: self.init_mean + offset,
            ..self.clone()
        }
    }

    /// Keeps only the first `rows` output rows.
    pub fn truncate_rows(&self, rows: usize) -> LinearWeights {
        let rows = rows.min(self.width_out).max(1);
        LinearWeights {
            w: self.w[..rows * self.width_in].to_vec(),
            width_out: rows,
            ..self.clone()
        }
    }
}

/// He initialization with a configurable mean: entries i.i.d. `N(mean_w, 2 / width_in)`.
pub fn he_init(width_out: usize, width_in: usize, mean_w: f64, seed: RandomSeed) -> Result<LinearWeights> {
    if width_out == 0 || width_in == 0 {
        return Err(Error::Domain(format!(
            "weight dimensions must be positive, got {width_out}×{width_in}"
        )));
    }
    let variance = 2.0 / width_in as f64;
    let sd = variance.sqrt();
    let mut rng = seed.rng();
    let w = (0..width_out * width_in)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean_w + sd * z
        })
        .collect();
    Ok(LinearWeights {
        w,
        width_out,
        width_in,
        init_mean: mean_w,
        init_variance: variance,
    })
}

/// `y = x Wᵀ`: every row of `x` mapped through the weight matrix.
pub fn linear_forward(x: &FeatureBatch, w: &LinearWeights) -> Result<FeatureBatch> {
    if x.width() != w.width_in {
        return Err(Error::shape(
            format!("input width {}", w.width_in),
            format!("input width {}", x.width()),
        ));
    }
    let (m, k, n) = (x.batch_size(), w.width_in, w.width_out);
    let mut y = vec![0.0; m * n];
    // SAFETY: a is m×k row-major, b = Wᵀ viewed with strides (1, k) over the
    // n×k row-major W, c is m×n row-major; all buffers have exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_slice().as_ptr(),
            k as isize,
            1,
            w.w.as_ptr(),
            1,
            k as isize,
            0.0,
            y.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(FeatureBatch::from_parts(m, n, y))
}
