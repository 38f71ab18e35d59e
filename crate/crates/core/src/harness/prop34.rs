use serde::{Deserialize, Serialize};

use super::report::{Prop34Row, RepStats, SweepResult};
use super::{check_common, merged_stats, over_chunks, PROP34_STREAM};
use crate::calculus::{delta_nonresidual, delta_residual, ResidualConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::{bn_forward, dropout_forward, he_init, linear_forward, relu_forward, skip_add, BnState, KeepProb, Phase};
use crate::stats::{pooled_variance, sample_gaussian, MomentAccumulator, RandomSeed};

/// Sweep over one residual block `x_0 + f(x_0)` with the branch
/// `f = [BN–ReLU–Weight–BN–ReLU–Dropout–Weight]` and `x_0 ~ N(0, var_x0)`.
///
/// Input draws, weights and masks depend only on the repetition (and the
/// keep probability for masks), so every grid point sees the same randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop34SweepConfig {
    pub keep_probs: Vec<KeepProb>,
    pub var_x0_values: Vec<f64>,
    pub width: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    /// Scale of the BN that feeds the dropout.
    pub bn_gamma: f64,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for Prop34SweepConfig {
    fn default() -> Self {
        Prop34SweepConfig {
            keep_probs: [0.5, 0.6, 0.7, 0.8, 0.9].map(|p| KeepProb::new(p).unwrap()).to_vec(),
            var_x0_values: vec![0.5, 1.0, 2.0, 4.0],
            width: 128,
            batch_size: super::DEFAULT_BATCH,
            repetitions: super::DEFAULT_REPETITIONS,
            bn_gamma: 1.0,
            seed: super::DEFAULT_SEED,
            exec: Execution::default(),
        }
    }
}

impl Prop34SweepConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.repetitions)?;
        if self.width == 0 {
            return Err(Error::Domain("width must be positive".to_string()));
        }
        // A zero-variance input makes the whole branch constant.
        if let Some(v) = self.var_x0_values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("var_x0 must be positive, got {v}")));
        }
        if !(self.bn_gamma > 0.0 && self.bn_gamma.is_finite()) {
            return Err(Error::Domain(format!("BN gamma must be positive, got {}", self.bn_gamma)));
        }
        Ok(())
    }
}

/// Accumulators of one chunk: test branch, test sum, then per keep
/// probability the train branch and train sum.
struct ChunkAccs {
    f_test: MomentAccumulator,
    sum_test: MomentAccumulator,
    train: Vec<(MomentAccumulator, MomentAccumulator)>,
}

/// Returns `[var index][p index] -> (Δ_nonres, Δ_res)` for one repetition.
fn run_rep(cfg: &Prop34SweepConfig, rep: usize) -> Result<Vec<Vec<(f64, f64)>>> {
    let n = cfg.width;
    let exec = cfg.exec;
    let root = RandomSeed::new(cfg.seed, 0).path(&[PROP34_STREAM, rep as u64]);
    let g = over_chunks(exec, cfg.batch_size, |k, rows| {
        sample_gaussian(0.0, 1.0, rows, n, root.path(&[1, k as u64]))
    })?;
    let w1 = he_init(n, n, 0.0, root.child(2))?;
    let w2 = he_init(n, n, 0.0, root.child(3))?;

    let mut out = Vec::with_capacity(cfg.var_x0_values.len());
    for &v in &cfg.var_x0_values {
        let sd = v.sqrt();
        let x0 = |k: usize| g[k].map(|t| sd * t);
        let accs = over_chunks(exec, cfg.batch_size, |k, _| Ok(MomentAccumulator::from_batch(&x0(k))))?;
        let bn1 = BnState::from_moments(&merged_stats(n, &accs), 1.0)?;
        let hidden = over_chunks(exec, cfg.batch_size, |k, _| {
            let u = linear_forward(&relu_forward(&bn_forward(&x0(k), &bn1)?), &w1)?;
            let acc = MomentAccumulator::from_batch(&u);
            Ok((u, acc))
        })?;
        let bn2 = BnState::from_moments(&merged_stats(n, hidden.iter().map(|(_, a)| a)), cfg.bn_gamma)?;

        let chunks = over_chunks(exec, cfg.batch_size, |k, _| {
            let skip = x0(k);
            let r = relu_forward(&bn_forward(&hidden[k].0, &bn2)?);
            let f = linear_forward(&r, &w2)?;
            let train = cfg
                .keep_probs
                .iter()
                .enumerate()
                .map(|(pi, &p)| {
                    let (d, _) = dropout_forward(&r, p, Phase::Train, root.path(&[4, pi as u64, k as u64]));
                    let ft = linear_forward(&d, &w2)?;
                    let st = skip_add(&skip, &ft)?;
                    Ok((MomentAccumulator::from_batch(&ft), MomentAccumulator::from_batch(&st)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ChunkAccs {
                f_test: MomentAccumulator::from_batch(&f),
                sum_test: MomentAccumulator::from_batch(&skip_add(&skip, &f)?),
                train,
            })
        })?;

        let var = |pick: &dyn Fn(&ChunkAccs) -> &MomentAccumulator| {
            pooled_variance(&merged_stats(n, chunks.iter().map(pick)))
        };
        let f_test = var(&|c| &c.f_test);
        let sum_test = var(&|c| &c.sum_test);
        let per_p = (0..cfg.keep_probs.len())
            .map(|pi| {
                let f_train = var(&|c| &c.train[pi].0);
                let sum_train = var(&|c| &c.train[pi].1);
                if !(f_train > 0.0 && sum_train > 0.0) {
                    return Err(Error::ZeroTrainVariance);
                }
                Ok((f_test / f_train, sum_test / sum_train))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(per_p);
    }
    Ok(out)
}

/// Measures `Δ(f)` and `Δ(x_0 + f)` at every `(p, var_x0)` grid point next
/// to their closed forms; rows ordered by p, then var_x0.
pub fn run_prop34_sweep(cfg: &Prop34SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let reps = (0..cfg.repetitions).map(|r| run_rep(cfg, r)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (pi, &p) in cfg.keep_probs.iter().enumerate() {
        for (vi, &v) in cfg.var_x0_values.iter().enumerate() {
            let nonres: Vec<f64> = reps.iter().map(|r| r[vi][pi].0).collect();
            let res: Vec<f64> = reps.iter().map(|r| r[vi][pi].1).collect();
            let rc = ResidualConfig::new(v, vec![cfg.bn_gamma], p)?;
            rows.push(Prop34Row {
                p: p.get(),
                var_x0: v,
                delta_nonres: RepStats::from_samples(&nonres),
                delta_res: RepStats::from_samples(&res),
                delta_nonres_cf: delta_nonresidual(p),
                delta_res_cf: delta_residual(&rc, 0)?,
            });
        }
    }
    Ok(SweepResult::Prop34(rows))
}
