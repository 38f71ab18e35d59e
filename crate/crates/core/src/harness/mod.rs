//! Monte Carlo experiments: PreDropout vs PostDropout around a weight layer,
//! residual vs non-residual blocks, and the two head orderings of dropout and
//! global average pooling.
//!
//! Each experiment is a pure function of its config. Repetitions use disjoint
//! random streams; within a repetition the batch is split into fixed row
//! chunks that may run in parallel and are reduced in chunk order.

mod head;
mod plot;
mod prop2;
mod prop34;
mod report;

pub use head::{run_head_comparison, HeadCompareConfig};
pub use prop2::{run_prop2_sweep, Prop2SweepConfig};
pub use prop34::{run_prop34_sweep, Prop34SweepConfig};
pub use report::{emit_csv, emit_json, emit_plot, fmt_sig6, HeadRow, Prop2Row, Prop34Row, RepStats, SweepResult};

use crate::error::{Error, Result};
use crate::exec::{row_spans, Execution};
use crate::stats::MomentAccumulator;

pub const DEFAULT_SEED: u64 = 20_240_607;
pub const DEFAULT_BATCH: usize = 100_000;
pub const DEFAULT_REPETITIONS: usize = 10;

const CHUNK_ROWS: usize = 2048;

const PROP2_STREAM: u64 = 2;
const PROP34_STREAM: u64 = 34;
const HEAD_STREAM: u64 = 5;

fn check_common(batch_size: usize, repetitions: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::Domain(format!("batch size must be at least 2, got {batch_size}")));
    }
    if repetitions == 0 {
        return Err(Error::Domain("at least one repetition is required".to_string()));
    }
    Ok(())
}

/// Runs `f` on every row chunk of a `batch_size` batch and returns the
/// per-chunk results in chunk order.
fn over_chunks<T, F>(exec: Execution, batch_size: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync + Send,
{
    let spans = row_spans(batch_size, CHUNK_ROWS);
    exec.map(spans.len(), |k| f(k, spans[k].1)).into_iter().collect()
}

fn merged_stats<'a>(width: usize, parts: impl IntoIterator<Item = &'a MomentAccumulator>) -> crate::stats::MomentStats {
    MomentAccumulator::merge_all(width, parts).finish()
}
