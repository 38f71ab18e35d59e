use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Mean and standard error of a statistic over independent repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepStats {
    pub mean: f64,
    /// Sample standard deviation over `√R`; zero for a single repetition.
    pub se: f64,
}

impl RepStats {
    pub fn from_samples(xs: &[f64]) -> RepStats {
        if xs.is_empty() {
            return RepStats { mean: f64::NAN, se: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return RepStats { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        RepStats {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// Stats of the per-repetition difference `a[r] - b[r]`.
    pub fn paired_diff(a: &[f64], b: &[f64]) -> RepStats {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        RepStats::from_samples(&d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop2Row {
    pub width: usize,
    pub mean_w: f64,
    pub delta_pre: RepStats,
    pub delta_post: RepStats,
    /// `delta_pre - delta_post`, paired by repetition.
    pub gap: RepStats,
    /// PreDropout condition value (sum over output rows), averaged over repetitions.
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop34Row {
    pub p: f64,
    pub var_x0: f64,
    pub delta_nonres: RepStats,
    pub delta_res: RepStats,
    pub delta_nonres_cf: f64,
    pub delta_res_cf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadRow {
    pub spatial_size: usize,
    pub p: f64,
    pub channels: usize,
    pub input_mean: f64,
    pub input_variance: f64,
    pub relu: bool,
    /// `Var[GAP(Dropout(x))]`
    pub var_h4: RepStats,
    /// `Var[Dropout(GAP(x))]`
    pub var_h5: RepStats,
    /// `var_h5 - var_h4`, paired by repetition.
    pub gap: RepStats,
    pub var_h4_cf: f64,
    pub var_h5_cf: f64,
}

/// Rows of one experiment, in deterministic grid order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "experiment", content = "rows", rename_all = "snake_case")]
pub enum SweepResult {
    Prop2(Vec<Prop2Row>),
    Prop34(Vec<Prop34Row>),
    Head(Vec<HeadRow>),
}

const PROP2_HEADER: &str = "width,mean_w,delta_pre_mc,delta_pre_se,delta_post_mc,delta_post_se,gap,gap_se,condition";
const PROP34_HEADER: &str =
    "p,var_x0,delta_nonres_mc,delta_nonres_se,delta_res_mc,delta_res_se,delta_nonres_cf,delta_res_cf";
const HEAD_HEADER: &str = "spatial_size,p,channels,input_mean,input_var,relu,var_h4,var_h4_se,var_h5,var_h5_se,gap,gap_se,var_h4_cf,var_h5_cf";

impl SweepResult {
    pub fn len(&self) -> usize {
        match self {
            SweepResult::Prop2(r) => r.len(),
            SweepResult::Prop34(r) => r.len(),
            SweepResult::Head(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends the rows of `other`; both must come from the same experiment.
    pub fn extend(&mut self, other: SweepResult) -> Result<()> {
        match (self, other) {
            (SweepResult::Prop2(a), SweepResult::Prop2(b)) => a.extend(b),
            (SweepResult::Prop34(a), SweepResult::Prop34(b)) => a.extend(b),
            (SweepResult::Head(a), SweepResult::Head(b)) => a.extend(b),
            _ => return Err(Error::Domain("cannot mix rows of different experiments".to_string())),
        }
        Ok(())
    }

    pub fn csv_header(&self) -> &'static str {
        match self {
            SweepResult::Prop2(_) => PROP2_HEADER,
            SweepResult::Prop34(_) => PROP34_HEADER,
            SweepResult::Head(_) => HEAD_HEADER,
        }
    }

    /// Header plus one line per row; floats with 6 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(self.csv_header());
        out.push('\n');
        let f = fmt_sig6;
        match self {
            SweepResult::Prop2(rows) => {
                for r in rows {
                    let cells = [
                        r.width.to_string(),
                        f(r.mean_w),
                        f(r.delta_pre.mean),
                        f(r.delta_pre.se),
                        f(r.delta_post.mean),
                        f(r.delta_post.se),
                        f(r.gap.mean),
                        f(r.gap.se),
                        f(r.condition),
                    ];
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
            SweepResult::Prop34(rows) => {
                for r in rows {
                    let cells = [
                        f(r.p),
                        f(r.var_x0),
                        f(r.delta_nonres.mean),
                        f(r.delta_nonres.se),
                        f(r.delta_res.mean),
                        f(r.delta_res.se),
                        f(r.delta_nonres_cf),
                        f(r.delta_res_cf),
                    ];
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
            SweepResult::Head(rows) => {
                for r in rows {
                    let cells = [
                        r.spatial_size.to_string(),
                        f(r.p),
                        r.channels.to_string(),
                        f(r.input_mean),
                        f(r.input_variance),
                        r.relu.to_string(),
                        f(r.var_h4.mean),
                        f(r.var_h4.se),
                        f(r.var_h5.mean),
                        f(r.var_h5.se),
                        f(r.gap.mean),
                        f(r.gap.se),
                        f(r.var_h4_cf),
                        f(r.var_h5_cf),
                    ];
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep rows serialize");
        s.push('\n');
        s
    }
}

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write(path, &result.to_csv())
}

pub fn emit_json(result: &SweepResult, path: &Path) -> Result<()> {
    write(path, &result.to_json())
}

pub fn emit_plot(result: &SweepResult, path: &Path) -> Result<()> {
    write(path, &super::plot::render_svg(result))
}
