//! Closed-form moments and inconsistency ratios.
//!
//! The inconsistency ratio of an operation `f` is
//! `Δ(f) = Var[f_test] / Var[f_train]`; `Δ = 1` means the two phases agree.
//! Branch formulas assume a BN output `z ~ N(0, γ²)` feeding
//! ReLU → Dropout → He-initialized zero-mean weight.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{KeepProb, LinearWeights, Phase};
use crate::stats::RandomSeed;

/// Train-phase variance of inverted dropout: `Var/p + (1 - p)/p · E²`.
pub fn dropout_train_variance(var_x: f64, mean_x: f64, p: KeepProb) -> Result<f64> {
    if !(var_x >= 0.0) {
        return Err(Error::NegativeVariance(var_x));
    }
    let p = p.get();
    Ok(var_x / p + (1.0 - p) / p * mean_x * mean_x)
}

/// Mean and variance of `ReLU(z)` for `z ~ N(0, γ²)`.
pub fn relu_gaussian_moments(gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let mean = gamma / (2.0 * PI).sqrt();
    let var = (PI - 1.0) / (2.0 * PI) * gamma * gamma;
    Ok((mean, var))
}

/// Mean and variance of `ReLU(z)` for `z ~ N(mean, variance)`, any mean.
pub fn relu_normal_moments(mean: f64, variance: f64) -> Result<(f64, f64)> {
    if !(variance >= 0.0) {
        return Err(Error::NegativeVariance(variance));
    }
    if variance == 0.0 {
        let r = mean.max(0.0);
        return Ok((r, 0.0));
    }
    let sd = variance.sqrt();
    let a = mean / sd;
    let cdf = 0.5 * libm::erfc(-a / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
    let m1 = mean * cdf + sd * pdf;
    let m2 = (mean * mean + variance) * cdf + mean * sd * pdf;
    Ok((m1, (m2 - m1 * m1).max(0.0)))
}

/// Variance of the residual branch output `W · Dropout(ReLU(z))`, `z ~ N(0, γ²)`.
///
/// Train: `(π/p − 1)/π · γ²`. Test: `(π − 1)/π · γ²`.
pub fn dropped_branch_variance(gamma: f64, p: KeepProb, phase: Phase) -> f64 {
    let g2 = gamma * gamma;
    match phase {
        Phase::Train => (PI / p.get() - 1.0) / PI * g2,
        Phase::Test => (PI - 1.0) / PI * g2,
    }
}

/// Δ of a non-residual block with dropout after its last BN: `(π − 1)/(π/p − 1)`.
pub fn delta_nonresidual(p: KeepProb) -> f64 {
    (PI - 1.0) / (PI / p.get() - 1.0)
}

/// Skip-path variance and per-block BN scales of a stack of residual blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualConfig {
    pub var_x0: f64,
    pub gammas: Vec<f64>,
    pub p: KeepProb,
}

impl ResidualConfig {
    pub fn new(var_x0: f64, gammas: Vec<f64>, p: KeepProb) -> Result<Self> {
        if !(var_x0 >= 0.0 && var_x0.is_finite()) {
            return Err(Error::NegativeVariance(var_x0));
        }
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Domain(format!("gammas must be positive, got {g}")));
        }
        Ok(ResidualConfig { var_x0, gammas, p })
    }

    fn gamma_sq_sum(&self, upto: usize) -> f64 {
        self.gammas[..upto].iter().map(|g| g * g).sum()
    }
}

/// Trunk variance `Var[x_l]` after `upto_l` residual blocks in the given phase.
pub fn accumulated_variance(cfg: &ResidualConfig, upto_l: usize, phase: Phase) -> Result<f64> {
    if upto_l > cfg.gammas.len() {
        return Err(Error::IndexOutOfRange {
            index: upto_l,
            len: cfg.gammas.len(),
        });
    }
    Ok(cfg.var_x0 + dropped_branch_variance(1.0, cfg.p, phase) * cfg.gamma_sq_sum(upto_l))
}

/// Δ of the residual block output `x_l + f_l(x_l)` for block index `l`
/// (uses `γ_0 ..= γ_l`).
pub fn delta_residual(cfg: &ResidualConfig, l: usize) -> Result<f64> {
    if l >= cfg.gammas.len() {
        return Err(Error::IndexOutOfRange {
            index: l,
            len: cfg.gammas.len(),
        });
    }
    let test = accumulated_variance(cfg, l + 1, Phase::Test)?;
    let train = accumulated_variance(cfg, l + 1, Phase::Train)?;
    Ok(test / train)
}

/// Variances of the two head orderings over `s` spatial positions, for
/// feature-map elements that are i.i.d. with the given mean and variance.
///
/// Returns `(Var[GAP(Dropout(x))], Var[Dropout(GAP(x))])`, i.e. (H4, H5).
pub fn head_variances(elem_mean: f64, elem_var: f64, p: KeepProb, spatial_size: usize) -> Result<(f64, f64)> {
    if !(elem_var >= 0.0) {
        return Err(Error::NegativeVariance(elem_var));
    }
    if spatial_size == 0 {
        return Err(Error::Domain("spatial size must be positive".to_string()));
    }
    let s = spatial_size as f64;
    let q = (1.0 - p.get()) / p.get();
    let gap_var = elem_var / s;
    let h4 = gap_var + q * (elem_var + elem_mean * elem_mean) / s;
    let h5 = gap_var + q * (gap_var + elem_mean * elem_mean);
    Ok((h4, h5))
}

/// Result of the PreDropout weight condition
/// `Σ_j Σ_{k≠j} w_ij w_ik E[x_j x_k] > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreDropoutCondition {
    /// Sum of the per-row values.
    pub value: f64,
    pub holds: bool,
    /// The double sum for each output row `i`.
    pub per_row: Vec<f64>,
}

impl PreDropoutCondition {
    /// True when the condition holds for every output row.
    pub fn holds_per_row(&self) -> bool {
        self.per_row.iter().all(|&v| v > 0.0)
    }
}

/// Evaluates the PreDropout condition for weights `w` and the input
/// second-moment matrix `E[x xᵀ]` (row-major, `width_in × width_in`).
pub fn predropout_condition(w: &LinearWeights, second_moments: &[f64]) -> Result<PreDropoutCondition> {
    let n = w.width_in();
    if second_moments.len() != n * n {
        return Err(Error::shape(
            format!("{n}×{n} second moments"),
            format!("{} values", second_moments.len()),
        ));
    }
    let scale = second_moments.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..n {
        for k in (j + 1)..n {
            let (a, b) = (second_moments[j * n + k], second_moments[k * n + j]);
            if (a - b).abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Asymmetric { row: j, col: k });
            }
        }
    }
    let m = w.width_out();
    // ws = W S, so row i of ws dotted with w_i gives w_iᵀ S w_i.
    let mut ws = vec![0.0; m * n];
    // SAFETY: W is m×n row-major, S is n×n row-major, ws is m×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            n,
            1.0,
            w.as_slice().as_ptr(),
            n as isize,
            1,
            second_moments.as_ptr(),
            n as isize,
            1,
            0.0,
            ws.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let per_row: Vec<f64> = (0..m)
        .map(|i| {
            let wi = w.row(i);
            let quad: f64 = wi.iter().zip(&ws[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
            let diag: f64 = wi.iter().enumerate().map(|(j, a)| a * a * second_moments[j * n + j]).sum();
            quad - diag
        })
        .collect();
    let value = per_row.iter().sum();
    Ok(PreDropoutCondition {
        value,
        holds: value > 0.0,
        per_row,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub delta: f64,
    pub var_train: f64,
    pub var_test: f64,
    pub source: EstimateSource,
    pub batch_size: Option<usize>,
    pub seed: Option<RandomSeed>,
}

/// Provenance of a Monte Carlo variance pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct McMeta {
    pub batch_size: Option<usize>,
    pub seed: Option<RandomSeed>,
}

/// Δ from measured train/test variances.
pub fn delta_from_mc(var_train: f64, var_test: f64, meta: McMeta) -> Result<InconsistencyReport> {
    let report = ratio(var_train, var_test)?;
    Ok(InconsistencyReport {
        source: EstimateSource::MonteCarlo,
        batch_size: meta.batch_size,
        seed: meta.seed,
        ..report
    })
}

/// Δ from closed-form train/test variances.
pub fn delta_closed_form(var_train: f64, var_test: f64) -> Result<InconsistencyReport> {
    ratio(var_train, var_test)
}

fn ratio(var_train: f64, var_test: f64) -> Result<InconsistencyReport> {
    if !(var_train > 0.0) {
        return Err(Error::ZeroTrainVariance);
    }
    if !(var_test >= 0.0) {
        return Err(Error::NegativeVariance(var_test));
    }
    Ok(InconsistencyReport {
        delta: var_test / var_train,
        var_train,
        var_test,
        source: EstimateSource::ClosedForm,
        batch_size: None,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(p: f64) -> KeepProb {
        KeepProb::new(p).unwrap()
    }

    // Closed forms evaluated by hand: (π − 1)/π = 0.681690113816209,
    // (2π − 1)/π = 1.681690113816209, (π − 1)/(2π − 1) = 0.405360124...
    const BRANCH_TEST: f64 = 0.681_690_113_816_209;
    const BRANCH_TRAIN_HALF: f64 = 1.681_690_113_816_209;

    #[test]
    fn dropout_variance_formula() {
        assert_eq!(dropout_train_variance(1.0, 0.0, kp(0.5)).unwrap(), 2.0);
        assert_eq!(dropout_train_variance(0.0, 1.0, kp(0.5)).unwrap(), 1.0);
        let v = dropout_train_variance(1.0, 0.0, kp(0.999)).unwrap();
        assert!((v - 1.001).abs() < 1e-5);
        assert!(dropout_train_variance(-1.0, 0.0, kp(0.5)).is_err());
    }

    #[test]
    fn relu_moments() {
        let (m, v) = relu_gaussian_moments(1.0).unwrap();
        assert!((m - 0.39894).abs() < 1e-5);
        assert!((v - 0.34085).abs() < 1e-5);
        let (m2, v2) = relu_gaussian_moments(2.0).unwrap();
        assert!((m2 - 2.0 * m).abs() < 1e-15);
        assert!((v2 - 4.0 * v).abs() < 1e-15);
        assert!(relu_gaussian_moments(0.0).is_err());
        let (gm, gv) = relu_normal_moments(0.0, 1.0).unwrap();
        assert!((gm - m).abs() < 1e-12 && (gv - v).abs() < 1e-12);
        assert_eq!(relu_normal_moments(3.0, 0.0).unwrap(), (3.0, 0.0));
        assert_eq!(relu_normal_moments(-3.0, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn relu_normal_moments_quadrature() {
        // Oracle: trapezoidal integration of max(0, z) against the N(μ, σ²) density.
        for &(mu, var) in &[(1.0, 1.0), (-0.5, 2.0), (2.0, 0.25)] {
            let sd: f64 = f64::sqrt(var);
            let (lo, hi, n) = (mu - 12.0 * sd, mu + 12.0 * sd, 200_000);
            let h = (hi - lo) / n as f64;
            let (mut e1, mut e2) = (0.0, 0.0);
            for i in 0..=n {
                let z = lo + i as f64 * h;
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                let dens = (-(z - mu) * (z - mu) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
                let r = z.max(0.0);
                e1 += wgt * r * dens * h;
                e2 += wgt * r * r * dens * h;
            }
            let (m, v) = relu_normal_moments(mu, var).unwrap();
            assert!((m - e1).abs() < 1e-6, "{mu} {var}: {m} vs {e1}");
            assert!((v - (e2 - e1 * e1)).abs() < 1e-6);
        }
    }

    #[test]
    fn branch_variances() {
        let p = kp(0.5);
        assert!((dropped_branch_variance(1.0, p, Phase::Train) - BRANCH_TRAIN_HALF).abs() < 1e-12);
        assert!((dropped_branch_variance(1.0, p, Phase::Test) - BRANCH_TEST).abs() < 1e-12);
        assert_eq!(
            dropped_branch_variance(1.3, kp(0.2), Phase::Test),
            dropped_branch_variance(1.3, kp(0.9), Phase::Test)
        );
    }

    #[test]
    fn nonresidual_delta() {
        assert!((delta_nonresidual(kp(0.5)) - 0.405_360_124_446).abs() < 1e-11);
        assert!((delta_nonresidual(kp(0.999_999)) - 1.0).abs() < 1e-5);
        let ps = [0.5, 0.6, 0.7, 0.8, 0.9];
        for w in ps.windows(2) {
            assert!(delta_nonresidual(kp(w[0])) < delta_nonresidual(kp(w[1])));
        }
    }

    #[test]
    fn accumulated() {
        let cfg = ResidualConfig::new(1.0, vec![1.0, 1.0], kp(0.5)).unwrap();
        let train = accumulated_variance(&cfg, 2, Phase::Train).unwrap();
        assert!((train - (1.0 + 2.0 * BRANCH_TRAIN_HALF)).abs() < 1e-12);
        assert!((train - 4.36338).abs() < 1e-5);
        let test = accumulated_variance(&cfg, 2, Phase::Test).unwrap();
        assert!((test - 2.36338).abs() < 1e-5);
        assert_eq!(accumulated_variance(&cfg, 0, Phase::Train).unwrap(), 1.0);
        assert_eq!(accumulated_variance(&cfg, 0, Phase::Test).unwrap(), 1.0);
        assert!(matches!(
            accumulated_variance(&cfg, 3, Phase::Test),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn residual_delta() {
        let p = kp(0.5);
        let cfg = ResidualConfig::new(1.0, vec![1.0], p).unwrap();
        let d = delta_residual(&cfg, 0).unwrap();
        assert!((d - (1.0 + BRANCH_TEST) / (1.0 + BRANCH_TRAIN_HALF)).abs() < 1e-12);
        assert!((d - 0.62710).abs() < 1e-5);
        let zero = ResidualConfig::new(0.0, vec![1.0], p).unwrap();
        assert!((delta_residual(&zero, 0).unwrap() - delta_nonresidual(p)).abs() < 1e-12);
        let big = ResidualConfig::new(1e6, vec![1.0], p).unwrap();
        assert!((delta_residual(&big, 0).unwrap() - 1.0).abs() < 1e-5);
        assert!(delta_residual(&cfg, 1).is_err());
    }

    #[test]
    fn head_closed_form_matches_bernoulli() {
        let p = kp(0.5);
        let (h4, h5) = head_variances(1.0, 0.0, p, 16).unwrap();
        assert!((h4 - 0.0625).abs() < 1e-15);
        assert!((h5 - 1.0).abs() < 1e-15);
        let (a, b) = head_variances(0.7, 1.3, p, 1).unwrap();
        assert!((a - b).abs() < 1e-15);
        // zero-mean i.i.d. elements: both orders coincide
        let (a, b) = head_variances(0.0, 1.0, kp(0.8), 49).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn predropout_examples() {
        let ones = vec![1.0; 4];
        let w = LinearWeights::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let c = predropout_condition(&w, &ones).unwrap();
        assert_eq!(c.value, 4.0);
        assert!(c.holds && c.holds_per_row());
        let c = predropout_condition(&LinearWeights::identity(2), &ones).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(!c.holds);
        // Hand expansion for the row [1, -1]: w1 w2 S12 + w2 w1 S21 = -1 - 1 = -2 per row.
        let w = LinearWeights::from_rows(&[[1.0, -1.0], [1.0, -1.0]]).unwrap();
        let c = predropout_condition(&w, &ones).unwrap();
        assert_eq!(c.value, -4.0);
        assert_eq!(c.per_row, vec![-2.0, -2.0]);
        assert!(!c.holds);
        assert!(matches!(
            predropout_condition(&w, &[1.0, 2.0, 3.0, 1.0]),
            Err(Error::Asymmetric { .. })
        ));
        assert!(predropout_condition(&w, &[1.0; 9]).is_err());
    }

    #[test]
    fn mc_reports() {
        let r = delta_from_mc(2.0, 2.0, McMeta::default()).unwrap();
        assert_eq!(r.delta, 1.0);
        assert_eq!(r.source, EstimateSource::MonteCarlo);
        assert_eq!(delta_from_mc(10.0, 2.0, McMeta::default()).unwrap().delta, 0.2);
        let r = delta_from_mc(BRANCH_TRAIN_HALF, BRANCH_TEST, McMeta::default()).unwrap();
        assert!((r.delta - delta_nonresidual(kp(0.5))).abs() < 1e-12);
        assert!(matches!(delta_from_mc(0.0, 1.0, McMeta::default()), Err(Error::ZeroTrainVariance)));
        assert_eq!(delta_closed_form(4.0, 1.0).unwrap().source, EstimateSource::ClosedForm);
    }

    fn naive_condition_row(w: &[f64], s: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    acc += w[j] * w[k] * s[j * n + k];
                }
            }
        }
        acc
    }

    proptest! {
        #[test]
        fn residual_between_nonresidual_and_one(
            p in 0.05f64..0.95,
            var_x0 in 1e-3f64..1e3,
            gammas in proptest::collection::vec(0.1f64..5.0, 1..6),
        ) {
            let p = kp(p);
            let l = gammas.len() - 1;
            let cfg = ResidualConfig::new(var_x0, gammas, p).unwrap();
            let d = delta_residual(&cfg, l).unwrap();
            prop_assert!(delta_nonresidual(p) < d);
            prop_assert!(d < 1.0);
        }

        #[test]
        fn residual_monotone(p in 0.05f64..0.9, dp in 0.01f64..0.09, v in 0.01f64..100.0, dv in 0.01f64..10.0, g in 0.1f64..3.0) {
            let base = ResidualConfig::new(v, vec![g], kp(p)).unwrap();
            let more_var = ResidualConfig::new(v + dv, vec![g], kp(p)).unwrap();
            let more_p = ResidualConfig::new(v, vec![g], kp(p + dp)).unwrap();
            let d = delta_residual(&base, 0).unwrap();
            prop_assert!(delta_residual(&more_var, 0).unwrap() > d);
            prop_assert!(delta_residual(&more_p, 0).unwrap() > d);
        }

        #[test]
        fn mediant_inequality(x in 1e-6f64..1e3, ratio in 1e-3f64..0.999, c in 1e-6f64..1e3) {
            let y = x / ratio;
            prop_assert!(x / y < (x + c) / (y + c));
        }

        #[test]
        fn dropout_variance_at_least_input(v in 0.0f64..100.0, m in -10.0f64..10.0, p in 0.01f64..0.99) {
            prop_assert!(dropout_train_variance(v, m, kp(p)).unwrap() >= v);
        }

        #[test]
        fn condition_matches_double_sum(rows in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
            let w = crate::layers::he_init(rows, n, 0.1, RandomSeed::new(seed, 0)).unwrap();
            let a = crate::layers::he_init(n, n, 0.0, RandomSeed::new(seed, 1)).unwrap();
            // S = A Aᵀ is symmetric PSD
            let mut s = vec![0.0; n * n];
            for j in 0..n {
                for k in 0..n {
                    s[j * n + k] = (0..n).map(|t| a.get(j, t) * a.get(k, t)).sum();
                }
            }
            for j in 0..n {
                for k in 0..j {
                    s[j * n + k] = s[k * n + j];
                }
            }
            let c = predropout_condition(&w, &s).unwrap();
            for i in 0..rows {
                let expect = naive_condition_row(w.row(i), &s, n);
                prop_assert!((c.per_row[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
            }
        }
    }
}
