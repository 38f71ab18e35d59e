use serde::{Deserialize, Serialize};

use super::report::{Prop2Row, RepStats, SweepResult};
use super::{check_common, merged_stats, over_chunks, PROP2_STREAM};
use crate::calculus::predropout_condition;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::{
    bn_forward, dropout_forward, he_init, linear_forward, relu_forward, sample_mask, BnState,
    KeepProb, Phase,
};
use crate::stats::{pooled_variance, sample_gaussian, second_moment_matrix, MomentAccumulator, RandomSeed};

/// Sweep for the [BN–ReLU–Weight–BN–ReLU] → {Dropout(W x), W Dropout(x)} experiment.
///
/// The weight under test `W` has i.i.d. entries `N(mean_w, 2/n)`. The
/// zero-mean part is drawn once per repetition and shared across all
/// `mean_w_values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2SweepConfig {
    pub widths: Vec<usize>,
    pub mean_w_values: Vec<f64>,
    pub p: KeepProb,
    pub batch_size: usize,
    pub repetitions: usize,
    /// Output rows of `W`; `None` makes it square.
    pub output_rows: Option<usize>,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for Prop2SweepConfig {
    fn default() -> Self {
        Prop2SweepConfig {
            widths: vec![128, 256, 512, 1024, 2048],
            mean_w_values: vec![-0.05, -0.02, 0.0, 0.02, 0.05],
            p: KeepProb::new(0.5).unwrap(),
            batch_size: super::DEFAULT_BATCH,
            repetitions: super::DEFAULT_REPETITIONS,
            output_rows: None,
            seed: super::DEFAULT_SEED,
            exec: Execution::default(),
        }
    }
}

impl Prop2SweepConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.repetitions)?;
        if self.widths.contains(&0) || self.output_rows == Some(0) {
            return Err(Error::Domain("widths must be positive".to_string()));
        }
        if let Some(m) = self.mean_w_values.iter().find(|m| !m.is_finite()) {
            return Err(Error::Domain(format!("mean_w must be finite, got {m}")));
        }
        Ok(())
    }
}

struct RepOutcome {
    delta_pre: Vec<f64>,
    delta_post: Vec<f64>,
    condition: Vec<f64>,
}

/// Centered sums of a pair of per-column series `a`, `b` over one chunk, so
/// the moments of `a + m b` follow for any `m` without another pass.
struct AffinePair {
    count: usize,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    s_aa: Vec<f64>,
    s_ab: Vec<f64>,
    s_bb: Vec<f64>,
}

impl AffinePair {
    fn new(rows: usize, width: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> Self {
        let mut mean_a = vec![0.0; width];
        let mut mean_b = vec![0.0; width];
        for r in 0..rows {
            for i in 0..width {
                mean_a[i] += a(r, i);
                mean_b[i] += b(r, i);
            }
        }
        let n = rows as f64;
        mean_a.iter_mut().chain(mean_b.iter_mut()).for_each(|m| *m /= n);
        let mut s_aa = vec![0.0; width];
        let mut s_ab = vec![0.0; width];
        let mut s_bb = vec![0.0; width];
        for r in 0..rows {
            for i in 0..width {
                let da = a(r, i) - mean_a[i];
                let db = b(r, i) - mean_b[i];
                s_aa[i] += da * da;
                s_ab[i] += da * db;
                s_bb[i] += db * db;
            }
        }
        AffinePair {
            count: rows,
            mean_a,
            mean_b,
            s_aa,
            s_ab,
            s_bb,
        }
    }

    fn at(&self, m: f64) -> MomentAccumulator {
        let mean = self.mean_a.iter().zip(&self.mean_b).map(|(a, b)| a + m * b).collect();
        let m2 = (0..self.s_aa.len())
            .map(|i| (self.s_aa[i] + 2.0 * m * self.s_ab[i] + m * m * self.s_bb[i]).max(0.0))
            .collect();
        MomentAccumulator::from_parts(self.count, mean, m2)
    }
}

/// Test output, PostDropout and PreDropout train outputs of one chunk.
type ChunkPairs = [AffinePair; 3];

fn run_rep(cfg: &Prop2SweepConfig, n: usize, rep: usize) -> Result<RepOutcome> {
    let root = RandomSeed::new(cfg.seed, 0).path(&[PROP2_STREAM, n as u64, rep as u64]);
    let exec = cfg.exec;
    let input = |k: usize, rows: usize| sample_gaussian(0.0, 1.0, rows, n, root.path(&[1, k as u64]));

    // Train-phase calibration pass for the first BN.
    let accs = over_chunks(exec, cfg.batch_size, |k, rows| Ok(MomentAccumulator::from_batch(&input(k, rows)?)))?;
    let bn1 = BnState::from_moments(&merged_stats(n, &accs), 1.0)?;

    let w1 = he_init(n, n, 0.0, root.child(2))?;
    let hidden = over_chunks(exec, cfg.batch_size, |k, rows| {
        let h = relu_forward(&bn_forward(&input(k, rows)?, &bn1)?);
        let u = linear_forward(&h, &w1)?;
        let acc = MomentAccumulator::from_batch(&u);
        Ok((u, acc))
    })?;
    let bn2 = BnState::from_moments(&merged_stats(n, hidden.iter().map(|(_, a)| a)), 1.0)?;

    let out = cfg.output_rows.unwrap_or(n);
    let z = he_init(out, n, 0.0, root.child(3))?;
    let ms = &cfg.mean_w_values;
    // With W = Z + m·11ᵀ: W x = Z x + m·rowsum(x), likewise for Dropout(x).
    let per_chunk: Vec<ChunkPairs> = over_chunks(exec, cfg.batch_size, |k, rows| {
        let x = relu_forward(&bn_forward(&hidden[k].0, &bn2)?);
        let zx = linear_forward(&x, &z)?;
        let rs = x.row_sums();
        let post_mask = sample_mask(rows, out, cfg.p, root.path(&[4, k as u64]));
        let (dx, _) = dropout_forward(&x, cfg.p, Phase::Train, root.path(&[5, k as u64]));
        let zdx = linear_forward(&dx, &z)?;
        let rsd = dx.row_sums();
        let keep = post_mask.bits();
        let scale = 1.0 / cfg.p.get();
        let masked = |r: usize, i: usize, v: f64| if keep[r * out + i] { v * scale } else { 0.0 };
        Ok([
            AffinePair::new(rows, out, |r, i| zx.get(r, i), |r, _| rs[r]),
            AffinePair::new(rows, out, |r, i| masked(r, i, zx.get(r, i)), |r, i| masked(r, i, rs[r])),
            AffinePair::new(rows, out, |r, i| zdx.get(r, i), |r, _| rsd[r]),
        ])
    })?;

    let x0 = relu_forward(&bn_forward(&hidden[0].0, &bn2)?);
    let s = second_moment_matrix(&x0);
    drop(hidden);

    let mut outcome = RepOutcome {
        delta_pre: Vec::with_capacity(ms.len()),
        delta_post: Vec::with_capacity(ms.len()),
        condition: Vec::with_capacity(ms.len()),
    };
    for &m in ms {
        let var = |slot: usize| {
            let accs: Vec<MomentAccumulator> = per_chunk.iter().map(|c| c[slot].at(m)).collect();
            pooled_variance(&merged_stats(out, &accs))
        };
        let (test, post, pre) = (var(0), var(1), var(2));
        if !(post > 0.0 && pre > 0.0) {
            return Err(Error::ZeroTrainVariance);
        }
        outcome.delta_post.push(test / post);
        outcome.delta_pre.push(test / pre);
        outcome.condition.push(predropout_condition(&z.shifted(m), &s)?.value);
    }
    Ok(outcome)
}

/// Measures `Δ(W Dropout(x))` and `Δ(Dropout(W x))` for every
/// `(width, mean_w)` pair; rows ordered by width, then mean_w.
pub fn run_prop2_sweep(cfg: &Prop2SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in &cfg.widths {
        let reps = (0..cfg.repetitions)
            .map(|r| run_rep(cfg, n, r))
            .collect::<Result<Vec<_>>>()?;
        for (i, &m) in cfg.mean_w_values.iter().enumerate() {
            let pre: Vec<f64> = reps.iter().map(|r| r.delta_pre[i]).collect();
            let post: Vec<f64> = reps.iter().map(|r| r.delta_post[i]).collect();
            let cond = reps.iter().map(|r| r.condition[i]).sum::<f64>() / reps.len() as f64;
            rows.push(Prop2Row {
                width: n,
                mean_w: m,
                delta_pre: RepStats::from_samples(&pre),
                delta_post: RepStats::from_samples(&post),
                gap: RepStats::paired_diff(&pre, &post),
                condition: cond,
            });
        }
    }
    Ok(SweepResult::Prop2(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(exec: Execution) -> Prop2SweepConfig {
        Prop2SweepConfig {
            widths: vec![16, 32],
            mean_w_values: vec![0.0, 0.1],
            batch_size: 3000,
            repetitions: 3,
            exec,
            ..Prop2SweepConfig::default()
        }
    }

    #[test]
    fn affine_pair_matches_direct_moments() {
        let seed = RandomSeed::new(5, 5);
        let a = sample_gaussian(0.3, 2.0, 300, 4, seed).unwrap();
        let b = sample_gaussian(-1.0, 0.5, 300, 4, seed.child(1)).unwrap();
        let pair = AffinePair::new(300, 4, |r, i| a.get(r, i), |r, i| b.get(r, i));
        for m in [-0.3, 0.0, 0.05, 2.0] {
            let direct: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + m * y).collect();
            let direct = MomentAccumulator::from_batch(&crate::stats::FeatureBatch::new(300, 4, direct).unwrap()).finish();
            let got = pair.at(m).finish();
            for i in 0..4 {
                assert!((got.mean[i] - direct.mean[i]).abs() < 1e-12);
                assert!((got.variance[i] - direct.variance[i]).abs() < 1e-10 * direct.variance[i]);
            }
        }
    }

    #[test]
    fn shape_and_determinism() {
        let a = run_prop2_sweep(&small(Execution::Parallel)).unwrap();
        let b = run_prop2_sweep(&small(Execution::Sequential)).unwrap();
        assert_eq!(a, b);
        let SweepResult::Prop2(rows) = &a else { panic!() };
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].width, rows[0].mean_w), (16, 0.0));
        assert_eq!((rows[3].width, rows[3].mean_w), (32, 0.1));
        for r in rows {
            assert!(r.delta_pre.mean > 0.0 && r.delta_post.mean > 0.0);
            assert!(r.delta_pre.se >= 0.0);
        }
    }

    #[test]
    fn large_mean_separates_orderings() {
        let cfg = Prop2SweepConfig {
            widths: vec![64],
            mean_w_values: vec![0.1],
            batch_size: 8192,
            repetitions: 4,
            ..Prop2SweepConfig::default()
        };
        let SweepResult::Prop2(rows) = run_prop2_sweep(&cfg).unwrap() else { panic!() };
        let r = &rows[0];
        assert!(r.condition > 0.0);
        assert!(r.delta_post.mean < r.delta_pre.mean && r.delta_pre.mean < 1.0, "{r:?}");
    }

    #[test]
    fn rectangular_output() {
        let cfg = Prop2SweepConfig {
            widths: vec![16],
            mean_w_values: vec![0.0],
            batch_size: 500,
            repetitions: 1,
            output_rows: Some(4),
            ..Prop2SweepConfig::default()
        };
        let SweepResult::Prop2(rows) = run_prop2_sweep(&cfg).unwrap() else { panic!() };
        assert_eq!(rows[0].delta_pre.se, 0.0);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut Prop2SweepConfig)| {
            let mut c = small(Execution::Sequential);
            f(&mut c);
            run_prop2_sweep(&c).is_err()
        };
        assert!(bad(|c| c.widths = vec![0]));
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.repetitions = 0));
        assert!(bad(|c| c.mean_w_values = vec![f64::NAN]));
    }
}
