use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::{ModelGraph, OpKind};

/// Candidate dropout positions: `P0`–`P7` around a residual block and
/// `H1`–`H7` in the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PositionLabel {
    P(u8),
    H(u8),
    Unknown,
}

impl fmt::Display for PositionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionLabel::P(i) => write!(f, "P{i}"),
            PositionLabel::H(i) => write!(f, "H{i}"),
            PositionLabel::Unknown => f.write_str("Unknown"),
        }
    }
}

impl FromStr for PositionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("unknown position label `{s}`");
        if s == "Unknown" {
            return Ok(PositionLabel::Unknown);
        }
        let (kind, num) = s.split_at(s.len().min(1));
        let i: u8 = num.parse().map_err(|_| bad())?;
        match kind {
            "P" if i <= 7 => Ok(PositionLabel::P(i)),
            "H" if (1..=7).contains(&i) => Ok(PositionLabel::H(i)),
            _ => Err(bad()),
        }
    }
}

impl From<PositionLabel> for String {
    fn from(l: PositionLabel) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for PositionLabel {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// A residual block: an `Add` whose inputs meet again at `split`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlock {
    pub index: usize,
    pub add: usize,
    pub split: usize,
    /// Branch nodes strictly between `split` and `add`, in topological order.
    pub branch: Vec<usize>,
    /// Skip-path nodes strictly between `split` and `add` (empty for an identity skip).
    pub skip: Vec<usize>,
    /// The edge carrying the skip path into `add`.
    pub skip_edge: (usize, usize),
}

/// Finds every residual block, ordered topologically by its `Add`.
pub fn detect_blocks(g: &ModelGraph) -> Vec<ResidualBlock> {
    let anc = g.ancestor_table();
    let mut blocks = Vec::new();
    for &add in g.topo_order() {
        if g.op(add) != OpKind::Add {
            continue;
        }
        let (a, b) = (g.preds(add)[0], g.preds(add)[1]);
        let Some(split) = g
            .topo_order()
            .iter()
            .rev()
            .copied()
            .find(|&u| anc[a][u] && anc[b][u])
        else {
            continue;
        };
        let side = |p: usize| -> Vec<usize> {
            g.topo_order()
                .iter()
                .copied()
                .filter(|&u| anc[p][u] && !anc[split][u])
                .collect()
        };
        let (sa, sb) = (side(a), side(b));
        let weights = |s: &[usize]| s.iter().filter(|&&u| g.op(u) == OpKind::Weight).count();
        let a_is_branch = (weights(&sa), sa.len()) >= (weights(&sb), sb.len());
        let (branch, skip, skip_pred) = if a_is_branch { (sa, sb, b) } else { (sb, sa, a) };
        blocks.push(ResidualBlock {
            index: blocks.len(),
            add,
            split,
            branch,
            skip,
            skip_edge: (skip_pred, add),
        });
    }
    blocks
}

/// Where a dropout node sits, with the block or head it was matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Context {
    Branch(usize),
    Trunk(usize),
    Skip(usize),
    Head,
    Unmatched,
}

/// Labels every Dropout node, in topological order.
pub fn classify_dropout_positions(g: &ModelGraph) -> Vec<(String, PositionLabel)> {
    classify_with_context(g, &detect_blocks(g))
        .into_iter()
        .map(|(v, label, _)| (g.id(v).to_string(), label))
        .collect()
}

pub(crate) fn classify_with_context(g: &ModelGraph, blocks: &[ResidualBlock]) -> Vec<(usize, PositionLabel, Context)> {
    let anc = g.ancestor_table();
    g.topo_order()
        .iter()
        .copied()
        .filter(|&v| g.op(v) == OpKind::Dropout)
        .map(|d| {
            let (label, ctx) = classify_one(g, blocks, &anc, d);
            (d, label, ctx)
        })
        .collect()
}

fn classify_one(g: &ModelGraph, blocks: &[ResidualBlock], anc: &[Vec<bool>], d: usize) -> (PositionLabel, Context) {
    // innermost block whose branch holds the dropout
    if let Some(b) = blocks
        .iter()
        .filter(|b| b.branch.contains(&d))
        .min_by_key(|b| b.branch.len())
    {
        return (in_branch(g, &b.branch, d), Context::Branch(b.index));
    }
    if let Some(b) = blocks.iter().find(|b| b.skip.contains(&d)) {
        return (PositionLabel::Unknown, Context::Skip(b.index));
    }
    if let Some(b) = feeds_split(g, blocks, d) {
        return (PositionLabel::P(0), Context::Trunk(b));
    }
    match in_head(g, anc, d) {
        Some(label) => (label, Context::Head),
        None => (PositionLabel::Unknown, Context::Unmatched),
    }
}

/// The nearest non-Dropout predecessor.
fn prev_op(g: &ModelGraph, mut v: usize) -> Option<OpKind> {
    loop {
        let p = *g.preds(v).first()?;
        if g.op(p) != OpKind::Dropout {
            return Some(g.op(p));
        }
        v = p;
    }
}

fn in_branch(g: &ModelGraph, branch: &[usize], d: usize) -> PositionLabel {
    let ops: Vec<OpKind> = branch.iter().map(|&u| g.op(u)).filter(|&k| k != OpKind::Dropout).collect();
    // number of non-dropout branch ops ahead of the dropout
    let before = branch
        .iter()
        .take_while(|&&u| u != d)
        .filter(|&&u| g.op(u) != OpKind::Dropout)
        .count();
    let first_bn = ops.iter().position(|&k| k == OpKind::BN);
    let last_bn = ops.iter().rposition(|&k| k == OpKind::BN);
    let last_w = ops.iter().rposition(|&k| k == OpKind::Weight);
    let (Some(first_bn), Some(last_bn)) = (first_bn, last_bn) else {
        return PositionLabel::Unknown;
    };
    if before <= first_bn {
        return PositionLabel::P(1);
    }
    let prev = ops[before - 1];
    if before <= last_bn {
        return match prev {
            OpKind::BN => PositionLabel::P(2),
            k if k.is_activation() => PositionLabel::P(3),
            OpKind::Weight => PositionLabel::P(4),
            _ => PositionLabel::Unknown,
        };
    }
    let weight_ahead = ops[before..].contains(&OpKind::Weight);
    let ends_after_last_bn = last_w.is_none_or(|w| w < last_bn);
    if weight_ahead || ends_after_last_bn {
        return match prev {
            OpKind::BN => PositionLabel::P(5),
            k if k.is_activation() => PositionLabel::P(6),
            _ => PositionLabel::Unknown,
        };
    }
    PositionLabel::P(7)
}

/// A trunk dropout whose single-successor chain through activations and
/// other dropouts reaches the split of a block.
fn feeds_split(g: &ModelGraph, blocks: &[ResidualBlock], d: usize) -> Option<usize> {
    let mut v = d;
    loop {
        if let Some(b) = blocks.iter().find(|b| b.split == v) {
            return Some(b.index);
        }
        let &[next] = g.succs(v) else { return None };
        let passthrough = g.op(next) == OpKind::Dropout || g.op(next).is_activation();
        let is_split = blocks.iter().any(|b| b.split == next);
        if !(passthrough || is_split) {
            return None;
        }
        v = next;
    }
}

fn in_head(g: &ModelGraph, anc: &[Vec<bool>], d: usize) -> Option<PositionLabel> {
    let gaps: Vec<usize> = (0..g.len()).filter(|&v| g.op(v) == OpKind::GAP).collect();
    let prev = prev_op(g, d)?;
    if let Some(&gap) = gaps.iter().find(|&&gap| anc[d][gap]) {
        if prev == OpKind::GAP {
            return Some(PositionLabel::H(5));
        }
        if prev == OpKind::FC {
            return Some(PositionLabel::H(6));
        }
        let fc_between = (0..g.len()).any(|u| g.op(u) == OpKind::FC && anc[u][gap] && anc[d][u]);
        if prev.is_activation() && fc_between {
            return Some(PositionLabel::H(7));
        }
        return None;
    }
    let &gap = gaps.iter().find(|&&gap| anc[gap][d])?;
    let bn_between = (0..g.len()).any(|u| u != d && g.op(u) == OpKind::BN && anc[u][d] && anc[gap][u]);
    Some(if bn_between {
        if prev == OpKind::Weight {
            PositionLabel::H(2)
        } else {
            PositionLabel::H(1)
        }
    } else {
        match prev {
            OpKind::BN => PositionLabel::H(3),
            k if k.is_activation() => PositionLabel::H(4),
            _ => return None,
        }
    })
}
