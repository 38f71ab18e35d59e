//! Reporting helpers for the acceptance run: one line per criterion, and a
//! nonzero exit status if any criterion fails.

use std::time::{Duration, Instant};

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Outcome { pass: true, detail: detail.into() }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Outcome { pass: false, detail: detail.into() }
    }
}

/// Collects failed sub-checks so a criterion can report all of them at once.
#[derive(Debug, Default)]
pub struct Checks {
    failures: Vec<String>,
    count: usize,
}

impl Checks {
    pub fn new() -> Self {
        Checks::default()
    }

    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.count += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    /// `summary` on success; otherwise the first few failures.
    pub fn outcome(&self, summary: impl Into<String>) -> Outcome {
        if self.is_ok() {
            return Outcome::pass(format!("{} ({} checks)", summary.into(), self.count));
        }
        let shown: Vec<&str> = self.failures.iter().take(4).map(String::as_str).collect();
        Outcome::fail(format!(
            "{}/{} checks failed: {}",
            self.failures.len(),
            self.count,
            shown.join("; ")
        ))
    }
}

/// `|a - b| <= k * se`, with an absolute floor for zero-noise cases.
pub fn within_se(a: f64, b: f64, se: f64, k: f64) -> bool {
    (a - b).abs() <= k * se + 1e-12 * b.abs().max(1.0)
}

pub fn within_rel(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

/// Runs criteria in order and prints `criterion N name: PASS|FAIL (detail)`.
#[derive(Debug, Default)]
pub struct Runner {
    only: Option<Vec<usize>>,
    results: Vec<(usize, bool)>,
}

impl Runner {
    /// `only` restricts the run to the listed criterion numbers.
    pub fn new(only: Option<Vec<usize>>) -> Self {
        Runner { only, results: Vec::new() }
    }

    /// Reads a comma-separated filter from the `ACCEPTANCE_ONLY` variable.
    pub fn from_env() -> Self {
        let only = std::env::var("ACCEPTANCE_ONLY")
            .ok()
            .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
        Runner::new(only)
    }

    pub fn run(&mut self, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
        if self.only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let start = Instant::now();
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Outcome::fail("panicked"));
        println!("{}", format_line(n, name, &out, start.elapsed()));
        self.results.push((n, out.pass));
    }

    pub fn failed(&self) -> Vec<usize> {
        self.results.iter().filter(|r| !r.1).map(|r| r.0).collect()
    }

    /// Prints the summary and returns the process exit code.
    pub fn finish(&self) -> i32 {
        let failed = self.failed();
        println!(
            "acceptance: {} passed, {} failed",
            self.results.len() - failed.len(),
            failed.len()
        );
        i32::from(!failed.is_empty())
    }
}

pub fn format_line(n: usize, name: &str, out: &Outcome, elapsed: Duration) -> String {
    format!(
        "criterion {n} {name}: {} ({}; {:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    )
}
