//! The `dropvar` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::calculus::{
    accumulated_variance, delta_nonresidual, delta_residual, dropout_train_variance, relu_gaussian_moments,
    ResidualConfig,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::{
    emit_csv, emit_json, emit_plot, fmt_sig6, run_head_comparison, run_prop2_sweep, run_prop34_sweep,
    HeadCompareConfig, Prop2SweepConfig, Prop34SweepConfig, SweepResult, DEFAULT_BATCH, DEFAULT_REPETITIONS,
    DEFAULT_SEED,
};
use crate::layers::{KeepProb, Phase};
use crate::lint::{exit_code, lint_file, render_json_lines, render_text};

#[derive(Debug, Parser)]
#[command(name = "dropvar", version, about = "Train/test variance inconsistency of dropout")]
struct Cli {
    /// Seed for all random streams
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Directory for output files
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Run every loop on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Svg => "svg",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate a closed-form quantity
    Analyze(AnalyzeArgs),
    /// PreDropout vs PostDropout sweep over widths and weight means
    #[command(name = "reproduce-fig2")]
    ReproduceFig2(Fig2Args),
    /// Residual vs non-residual block sweep over keep probabilities and input variances
    #[command(name = "reproduce-fig3")]
    ReproduceFig3(Fig3Args),
    /// Head orderings GAP(Dropout(x)) vs Dropout(GAP(x))
    HeadCompare(HeadArgs),
    /// Check dropout placement in model graphs
    Lint(LintArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("quantity").required(true).args([
    "delta_nonresidual", "delta_residual", "accumulated_variance", "train_variance", "relu_moments",
])))]
struct AnalyzeArgs {
    /// (π − 1)/(π/p − 1)
    #[arg(long)]
    delta_nonresidual: bool,
    /// Δ of residual block `l`; needs --var-x0 and --gammas
    #[arg(long)]
    delta_residual: bool,
    /// Trunk variance after `l` blocks in --phase; needs --var-x0 and --gammas
    #[arg(long)]
    accumulated_variance: bool,
    /// Train-phase variance of dropout applied to an input with --mean and --var
    #[arg(long)]
    train_variance: bool,
    /// Mean and variance of ReLU(N(0, γ²))
    #[arg(long)]
    relu_moments: bool,
    #[arg(long, value_parser = parse_keep_prob, default_value = "0.5")]
    p: KeepProb,
    #[arg(long, default_value_t = 1.0)]
    var_x0: f64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    gammas: Vec<f64>,
    /// Block index (default: the last block; for --accumulated-variance, all blocks)
    #[arg(long)]
    l: Option<usize>,
    #[arg(long, value_parser = parse_phase, default_value = "train")]
    phase: Phase,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean: f64,
    #[arg(long, default_value_t = 1.0)]
    var: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct Fig2Args {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
    widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-0.05,-0.02,0,0.02,0.05")]
    mean_w: Vec<f64>,
    #[arg(long, value_parser = parse_keep_prob, default_value = "0.5")]
    p: KeepProb,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    reps: usize,
    /// Output rows of the weight under test (default: square)
    #[arg(long)]
    output_rows: Option<usize>,
}

#[derive(Debug, Args)]
struct Fig3Args {
    #[arg(long, value_delimiter = ',', value_parser = parse_keep_prob, default_value = "0.5,0.6,0.7,0.8,0.9")]
    keep_probs: Vec<KeepProb>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    var_x0: Vec<f64>,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    reps: usize,
    /// Scale of the BN feeding the dropout
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Debug, Args)]
struct HeadArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,49")]
    spatial: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_keep_prob, default_value = "0.5,0.8")]
    p: Vec<KeepProb>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Mean of the Gaussian feature-map elements
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mean: f64,
    /// Variance of the elements; 0 gives a constant map
    #[arg(long, default_value_t = 1.0)]
    var: f64,
    /// Feed the raw Gaussian instead of its ReLU
    #[arg(long)]
    no_relu: bool,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    reps: usize,
}

#[derive(Debug, Args)]
struct LintArgs {
    /// Model graph JSON files
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn parse_keep_prob(s: &str) -> std::result::Result<KeepProb, String> {
    let p: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    KeepProb::new(p).map_err(|e| e.to_string())
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code: 0 success, 1 lint failures, 2 usage or runtime errors.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run_with(argv, &mut out, &mut err)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match &cli.command {
        Command::Analyze(a) => {
            let text = analyze(a)?;
            writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
            return Ok(0);
        }
        Command::Lint(l) => return lint(cli.format, l, out, err),
        Command::ReproduceFig2(a) => (
            "fig2",
            run_prop2_sweep(&Prop2SweepConfig {
                widths: a.widths.clone(),
                mean_w_values: a.mean_w.clone(),
                p: a.p,
                batch_size: a.batch,
                repetitions: a.reps,
                output_rows: a.output_rows,
                seed: cli.seed,
                exec,
            })?,
        ),
        Command::ReproduceFig3(a) => (
            "fig3",
            run_prop34_sweep(&Prop34SweepConfig {
                keep_probs: a.keep_probs.clone(),
                var_x0_values: a.var_x0.clone(),
                width: a.width,
                batch_size: a.batch,
                repetitions: a.reps,
                bn_gamma: a.gamma,
                seed: cli.seed,
                exec,
            })?,
        ),
        Command::HeadCompare(a) => ("head", head_compare(a, cli.seed, exec)?),
    };
    let (stem, result) = result;
    let path = cli.out_dir.join(format!("{stem}.{}", cli.format.extension()));
    write_result(&result, cli.format, &path)?;
    writeln!(out, "{}", path.display()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(0)
}

fn write_result(result: &SweepResult, format: Format, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        Format::Csv => emit_csv(result, path),
        Format::Json => emit_json(result, path),
        Format::Svg => emit_plot(result, path),
    }
}

fn analyze(a: &AnalyzeArgs) -> Result<String> {
    let residual = || ResidualConfig::new(a.var_x0, a.gammas.clone(), a.p);
    let value = if a.delta_nonresidual {
        delta_nonresidual(a.p)
    } else if a.delta_residual {
        let cfg = residual()?;
        let l = a.l.unwrap_or(cfg.gammas.len().saturating_sub(1));
        delta_residual(&cfg, l)?
    } else if a.accumulated_variance {
        let cfg = residual()?;
        let l = a.l.unwrap_or(cfg.gammas.len());
        accumulated_variance(&cfg, l, a.phase)?
    } else if a.train_variance {
        dropout_train_variance(a.var, a.mean, a.p)?
    } else {
        let (m, v) = relu_gaussian_moments(a.gamma)?;
        return Ok(format!("{} {}", fmt_sig6(m), fmt_sig6(v)));
    };
    Ok(fmt_sig6(value))
}

fn head_compare(a: &HeadArgs, seed: u64, exec: Execution) -> Result<SweepResult> {
    let mut all = SweepResult::Head(Vec::new());
    for &p in &a.p {
        for &s in &a.spatial {
            let cfg = HeadCompareConfig {
                channels: a.channels,
                spatial_size: s,
                p,
                batch_size: a.batch,
                input_mean: a.mean,
                input_variance: a.var,
                relu: !a.no_relu,
                repetitions: a.reps,
                seed,
                exec,
            };
            all.extend(run_head_comparison(&cfg)?)?;
        }
    }
    Ok(all)
}

fn lint(format: Format, args: &LintArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut code = 0;
    let many = args.files.len() > 1;
    for path in &args.files {
        let diags = match lint_file(path) {
            Ok(d) => d,
            Err(e) => {
                let _ = writeln!(err, "error: {}: {e}", path.display());
                code = 2;
                continue;
            }
        };
        let text = match format {
            Format::Json => render_json_lines(&diags),
            _ => {
                let body = render_text(&diags);
                if many {
                    format!("{}:\n{body}", path.display())
                } else {
                    body
                }
            }
        };
        out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
        if code == 0 {
            code = exit_code(&diags);
        }
    }
    Ok(code)
}
