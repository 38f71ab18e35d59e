use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use dropvar::calculus::{dropout_train_variance, relu_gaussian_moments};
use dropvar::cli::run_with;
use dropvar::harness::{
    run_head_comparison, run_prop2_sweep, run_prop34_sweep, HeadCompareConfig, Prop2SweepConfig, Prop34SweepConfig,
    RepStats, SweepResult,
};
use dropvar::layers::{bn_calibrate, bn_forward, dropout_forward, dropout_with_mask, elu_forward, relu_forward, sample_mask};
use dropvar::lint::lint_file;
use dropvar::stats::{batch_moments, pooled_mean, pooled_variance, sample_gaussian};
use dropvar::{FeatureBatch, KeepProb, Phase, RandomSeed};
use dropvar_acceptance::{within_rel, within_se, Checks, Outcome, Runner};
use rand::{Rng, SeedableRng};
use serde::Deserialize;

const SEED: u64 = 20_240_607;
const K: f64 = 6.0;

fn keep(p: f64) -> KeepProb {
    KeepProb::new(p).unwrap()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_with(std::iter::once("dropvar").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err))
}

fn relu_dropout_commute() -> Outcome {
    let start = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(SEED);
    let mut c = Checks::new();
    let mut elu_gap = f64::INFINITY;
    for i in 0..1000u64 {
        let width = rng.random_range(1..=512);
        let rows = rng.random_range(1..=8);
        let p = keep(rng.random_range(0.05..0.95));
        let data: Vec<f64> = (0..rows * width).map(|_| rng.random_range(-1e3..1e3)).collect();
        let x = FeatureBatch::new(rows, width, data).unwrap();
        let mask = sample_mask(rows, width, p, RandomSeed::new(SEED, i));
        let a = relu_forward(&dropout_with_mask(&x, &mask).unwrap());
        let b = dropout_with_mask(&relu_forward(&x), &mask).unwrap();
        let same = a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits());
        c.check(same, || format!("batch {i} ({rows}x{width}) differs"));
        if i < 50 {
            let e1 = elu_forward(&dropout_with_mask(&x, &mask).unwrap(), 1.0).unwrap();
            let e2 = dropout_with_mask(&elu_forward(&x, 1.0).unwrap(), &mask).unwrap();
            let d = e1.as_slice().iter().zip(e2.as_slice()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            elu_gap = elu_gap.min(d.max(if x.as_slice().iter().all(|&v| v > 0.0) { f64::INFINITY } else { 0.0 }));
        }
    }
    c.check(elu_gap > 1e-6, || format!("ELU control discrepancy only {elu_gap:e}"));
    let t = start.elapsed();
    c.check(t < Duration::from_secs(10), || format!("took {t:?}"));
    c.outcome(format!("1000 batches bit-identical; ELU control min discrepancy {elu_gap:.3}"))
}

fn dropout_moments() -> Outcome {
    let mut c = Checks::new();
    for p in [0.5, 0.7, 0.9] {
        for (mean, var) in [(0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let (mut vtr, mut vte, mut mtr, mut mte) = (vec![], vec![], vec![], vec![]);
            for rep in 0..10u64 {
                let seed = RandomSeed::new(SEED, 0).path(&[2, rep, (p * 10.0) as u64, mean as u64, var as u64]);
                let x = sample_gaussian(mean, var, 100_000, 16, seed.child(0)).unwrap();
                let (y, _) = dropout_forward(&x, keep(p), Phase::Train, seed.child(1));
                let (t, _) = dropout_forward(&x, keep(p), Phase::Test, seed.child(1));
                let (my, mt) = (batch_moments(&y), batch_moments(&t));
                vtr.push(pooled_variance(&my));
                vte.push(pooled_variance(&mt));
                mtr.push(pooled_mean(&my));
                mte.push(pooled_mean(&mt));
            }
            // Population variance over N rows has expectation σ²(1 - 1/N).
            let bias = 1.0 - 1.0 / 100_000.0;
            let expect = bias * dropout_train_variance(var, mean, keep(p)).unwrap();
            let tr = RepStats::from_samples(&vtr);
            let te = RepStats::from_samples(&vte);
            let dm = RepStats::paired_diff(&mtr, &mte);
            let tag = format!("p={p} mean={mean} var={var}");
            c.check(within_se(tr.mean, expect, tr.se, K), || format!("{tag}: train var {} vs {expect} (se {})", tr.mean, tr.se));
            c.check(within_se(te.mean, bias * var, te.se, K), || format!("{tag}: test var {} vs {var}", te.mean));
            c.check(within_se(dm.mean, 0.0, dm.se, K), || format!("{tag}: mean shift {} (se {})", dm.mean, dm.se));
        }
    }
    c.outcome("train variance, test variance and means agree within 6 SE for 9 configurations")
}

fn fig2() -> Outcome {
    let start = Instant::now();
    let res = match run_prop2_sweep(&Prop2SweepConfig::default()) {
        Ok(SweepResult::Prop2(rows)) => rows,
        Ok(_) => return Outcome::fail("wrong result kind"),
        Err(e) => return Outcome::fail(e.to_string()),
    };
    let elapsed = start.elapsed();
    let mut c = Checks::new();
    let mut by_m: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in &res {
        let tag = format!("w={} m={}", r.width, r.mean_w);
        if r.mean_w.abs() >= 0.02 && r.width >= 512 {
            c.check(r.gap.mean > K * r.gap.se, || format!("{tag}: gap {} se {}", r.gap.mean, r.gap.se));
            c.check(r.delta_pre.mean < 1.0, || format!("{tag}: delta_pre {}", r.delta_pre.mean));
        }
        if r.mean_w == 0.0 {
            c.check(r.gap.mean.abs() < K * r.gap.se, || format!("{tag}: gap {} se {}", r.gap.mean, r.gap.se));
        }
        by_m.entry(format!("{}", r.mean_w)).or_default().push(r);
    }
    // Non-decreasing up to sampling noise between adjacent widths.
    for (m, rows) in &by_m {
        if m.parse::<f64>().unwrap().abs() < 0.02 {
            continue;
        }
        for pair in rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let tol = 2.0 * a.gap.se.hypot(b.gap.se);
            c.check(b.gap.mean >= a.gap.mean - tol, || {
                format!("m={m}: gap {} at {} < {} at {}", b.gap.mean, b.width, a.gap.mean, a.width)
            });
        }
    }
    let stats_ok = c.is_ok();
    let budget = Duration::from_secs(300);
    c.check(elapsed < budget, || format!("runtime {:.0}s exceeds {}s budget", elapsed.as_secs_f64(), budget.as_secs()));
    let g = res.iter().find(|r| r.width == 2048 && r.mean_w == 0.05);
    let detail = format!(
        "{} rows; statistical checks {}; gap at w=2048 m=0.05: {}",
        res.len(),
        if stats_ok { "all pass" } else { "FAIL" },
        g.map_or("n/a".into(), |r| format!("{:.4} ± {:.4}", r.gap.mean, r.gap.se)),
    );
    if c.is_ok() {
        c.outcome(detail)
    } else {
        Outcome::fail(format!("{detail}; {}", c.failures().join("; ")))
    }
}

fn fig3() -> Outcome {
    let rows = match run_prop34_sweep(&Prop34SweepConfig::default()) {
        Ok(SweepResult::Prop34(rows)) => rows,
        Ok(_) => return Outcome::fail("wrong result kind"),
        Err(e) => return Outcome::fail(e.to_string()),
    };
    let mut c = Checks::new();
    let mut worst: f64 = 0.0;
    for r in &rows {
        let tag = format!("p={} var_x0={}", r.p, r.var_x0);
        for (mc, cf) in [(r.delta_nonres.mean, r.delta_nonres_cf), (r.delta_res.mean, r.delta_res_cf)] {
            worst = worst.max((mc - cf).abs() / cf);
            c.check(within_rel(mc, cf, 0.02), || format!("{tag}: {mc} vs {cf}"));
        }
        c.check(r.delta_nonres.mean < r.delta_res.mean && r.delta_res.mean < 1.0, || {
            format!("{tag}: ordering {} {}", r.delta_nonres.mean, r.delta_res.mean)
        });
    }
    for pair in rows.windows(2).filter(|w| w[0].p == w[1].p) {
        c.check(pair[1].delta_res.mean > pair[0].delta_res.mean, || {
            format!("p={}: delta_res not increasing at var_x0={}", pair[1].p, pair[1].var_x0)
        });
    }
    c.outcome(format!("{} grid points, worst relative error {:.3}%", rows.len(), 100.0 * worst))
}

fn relu_moments() -> Outcome {
    let mut c = Checks::new();
    for (i, gamma) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let x = sample_gaussian(0.0, gamma * gamma, 100_000, 16, RandomSeed::new(SEED, 50 + i as u64)).unwrap();
        let m = batch_moments(&relu_forward(&x));
        let (mean, var) = relu_gaussian_moments(gamma).unwrap();
        c.check(within_rel(pooled_mean(&m), mean, 0.01), || format!("gamma={gamma}: mean {} vs {mean}", pooled_mean(&m)));
        c.check(within_rel(pooled_variance(&m), var, 0.01), || format!("gamma={gamma}: var {} vs {var}", pooled_variance(&m)));
    }
    c.outcome("mean and variance within 1% for gamma 0.5, 1, 2")
}

fn bn_example() -> Outcome {
    let train = sample_gaussian(0.0, 10.0, 100_000, 16, RandomSeed::new(SEED, 60)).unwrap();
    let test = sample_gaussian(0.0, 2.0, 100_000, 16, RandomSeed::new(SEED, 61)).unwrap();
    let bn = bn_calibrate(&train, 1.0).unwrap();
    let v = pooled_variance(&batch_moments(&bn_forward(&test, &bn).unwrap()));
    if within_rel(v, 0.2, 0.02) {
        Outcome::pass(format!("test-phase output variance {v:.4}"))
    } else {
        Outcome::fail(format!("test-phase output variance {v:.4}, expected 0.2"))
    }
}

fn head() -> Outcome {
    let mut c = Checks::new();
    for s in [1, 4, 16, 49] {
        for p in [0.5, 0.8] {
            for (mean, var, relu) in [(0.0, 1.0, true), (1.0, 0.0, false)] {
                let cfg = HeadCompareConfig { spatial_size: s, p: keep(p), input_mean: mean, input_variance: var, relu, ..Default::default() };
                let row = match run_head_comparison(&cfg) {
                    Ok(SweepResult::Head(rows)) => rows.into_iter().next().unwrap(),
                    other => return Outcome::fail(format!("s={s} p={p}: {other:?}")),
                };
                let tag = format!("s={s} p={p} {}", if relu { "relu" } else { "const" });
                if s == 1 {
                    c.check(within_se(row.gap.mean, 0.0, row.gap.se, K), || format!("{tag}: gap {} se {}", row.gap.mean, row.gap.se));
                } else {
                    c.check(row.gap.mean > K * row.gap.se, || format!("{tag}: gap {} se {}", row.gap.mean, row.gap.se));
                }
                let (h4, h5) = if relu {
                    (row.var_h4_cf, row.var_h5_cf)
                } else {
                    ((1.0 - p) / (p * s as f64), (1.0 - p) / p)
                };
                let bias = 1.0 - 1.0 / cfg.batch_size as f64;
                let (h4, h5) = (bias * h4, bias * h5);
                c.check(within_se(row.var_h4.mean, h4, row.var_h4.se, K), || format!("{tag}: H4 {} vs {h4}", row.var_h4.mean));
                c.check(within_se(row.var_h5.mean, h5, row.var_h5.se, K), || format!("{tag}: H5 {} vs {h5}", row.var_h5.mean));
            }
        }
    }
    c.outcome("H5 exceeds H4 for s > 1, equal at s = 1, constant-input variances match (1-p)/(ps) and (1-p)/p")
}

#[derive(Deserialize)]
struct Golden {
    exit: i32,
    diagnostics: Vec<(String, String, String)>,
}

fn linter() -> Outcome {
    let text = std::fs::read_to_string(fixtures().join("goldens.json")).unwrap();
    let goldens: BTreeMap<String, Golden> = serde_json::from_str(&text).unwrap();
    let mut c = Checks::new();
    for (name, g) in &goldens {
        let path = fixtures().join(format!("{name}.json"));
        if g.exit != 2 {
            match lint_file(&path) {
                Ok(diags) => {
                    let got: Vec<_> = diags.iter().map(|d| (d.node.clone(), d.label.to_string(), d.verdict.to_string())).collect();
                    c.check(got == g.diagnostics, || format!("{name}: got {got:?}"));
                }
                Err(e) => c.check(false, || format!("{name}: {e}")),
            }
        }
        let (code, _) = cli(&["lint", path.to_str().unwrap()]);
        c.check(code == g.exit, || format!("{name}: exit {code}, expected {}", g.exit));
    }
    c.outcome(format!("{} fixtures match labels, verdicts and exit codes", goldens.len()))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Checks::new();
    let cases: [(&str, &[&str]); 3] = [
        ("reproduce-fig2", &["--widths", "32,64", "--mean-w", "0,0.05", "--batch", "5000", "--reps", "3"]),
        ("reproduce-fig3", &["--width", "32", "--batch", "5000", "--reps", "3"]),
        ("head-compare", &["--batch", "5000", "--reps", "3"]),
    ];
    for (sub, extra) in cases {
        for format in ["csv", "json", "svg"] {
            let mut outputs = Vec::new();
            for (i, mode) in [None, None, Some("--sequential")].into_iter().enumerate() {
                let d = dir.path().join(format!("{sub}-{format}-{i}"));
                let mut args = vec!["--format", format, "--out-dir", d.to_str().unwrap()];
                args.extend(mode);
                args.push(sub);
                args.extend_from_slice(extra);
                let (code, msg) = cli(&args);
                c.check(code == 0, || format!("{sub}: exit {code}: {msg}"));
                let file = std::fs::read_dir(&d).ok().and_then(|mut r| r.next()).map(|e| e.unwrap().path());
                outputs.push(file.map(|f| std::fs::read(f).unwrap()).unwrap_or_default());
            }
            c.check(!outputs[0].is_empty() && outputs[0] == outputs[1], || format!("{sub} {format}: reruns differ"));
            c.check(outputs[0] == outputs[2], || format!("{sub} {format}: sequential differs from parallel"));
        }
    }
    c.outcome("fig2, fig3 and head-compare outputs byte-identical across reruns and execution modes")
}

fn main() {
    let mut r = Runner::from_env();
    r.run(1, "ReLU/dropout commutation", relu_dropout_commute);
    r.run(2, "dropout train/test moments", dropout_moments);
    r.run(3, "weight-mean sweep (default config, 5 min budget)", fig2);
    r.run(4, "residual vs non-residual inconsistency", fig3);
    r.run(5, "ReLU Gaussian moments", relu_moments);
    r.run(6, "frozen BN test-phase variance", bn_example);
    r.run(7, "head ordering H4 vs H5", head);
    r.run(8, "placement linter goldens", linter);
    r.run(9, "CLI determinism", cli_determinism);
    std::process::exit(r.finish());
}
