//! Static checks of dropout placement in residual networks.
//!
//! A model graph is parsed from JSON, residual blocks are found by matching
//! each `Add` against the nearest node where its two inputs diverge, and every
//! Dropout node is labeled with its position and checked against two rules:
//! one dropout after the last BN but before the last weight of a residual
//! branch, and one dropout after the BN but before GAP in the head.

mod classify;
mod graph;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use classify::{classify_dropout_positions, detect_blocks, PositionLabel, ResidualBlock};
pub use graph::{parse_model_graph, GraphDocument, ModelGraph, Node, NodeSpec, OpKind};

use classify::{classify_with_context, Context};

#[derive(Debug, thiserror::Error)]
pub enum LintError {
    #[error("invalid graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node `{node}` has unknown op `{op}`")]
    UnknownOp { node: String, op: String },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("edge {from} -> {to} refers to missing node `{missing}`")]
    DanglingEdge { from: String, to: String, missing: String },
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: String, to: String },
    #[error("graph has a cycle through back edge {from} -> {to}")]
    Cycle { from: String, to: String },
    #[error("graph must have exactly one {kind} node, found {count}")]
    Terminal { kind: OpKind, count: usize },
    #[error("{op} node `{node}` must have {expected} predecessor(s), found {actual}")]
    Arity {
        node: String,
        op: OpKind,
        expected: usize,
        actual: usize,
    },
    #[error("Output node `{0}` must not have successors")]
    OutputHasSuccessor(String),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Warn => "warn",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Rule {
    Guideline1,
    Guideline2,
    MultipleDropout,
    UnknownPosition,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Guideline1 => "Guideline1",
            Rule::Guideline2 => "Guideline2",
            Rule::MultipleDropout => "MultipleDropout",
            Rule::UnknownPosition => "UnknownPosition",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub node: String,
    pub label: PositionLabel,
    pub verdict: Verdict,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} {} [{}] {}", self.node, self.label, self.verdict, self.rule, self.message)
    }
}

fn position_verdict(label: PositionLabel) -> (Verdict, Rule, &'static str) {
    use PositionLabel::{Unknown, H, P};
    match label {
        P(0) => (Verdict::Fail, Rule::Guideline1, "dropout on the trunk before the block also drops the skip path"),
        P(1) => (Verdict::Fail, Rule::Guideline1, "dropout before the first BN of the branch shifts that BN's input variance"),
        P(2..=4) => (Verdict::Fail, Rule::Guideline1, "dropout between BNs of the branch shifts the next BN's input variance"),
        P(5) | P(6) => (Verdict::Pass, Rule::Guideline1, "dropout after the last BN of the branch"),
        P(7) => (Verdict::Warn, Rule::Guideline1, "dropout after the last weight acts as PostDropout; prefer P5 or P6"),
        H(3) | H(4) => (Verdict::Pass, Rule::Guideline2, "dropout after the head BN and before GAP"),
        H(5) => (Verdict::Warn, Rule::Guideline2, "dropout after GAP has higher train variance than before it; prefer H3 or H4"),
        H(1) | H(2) => (Verdict::Fail, Rule::Guideline2, "dropout before the head BN shifts its input variance"),
        H(6) | H(7) => (Verdict::Fail, Rule::Guideline2, "dropout on the logits perturbs the prediction directly"),
        P(_) | H(_) | Unknown => (Verdict::Warn, Rule::UnknownPosition, "dropout in an unrecognized context"),
    }
}

/// One diagnostic per Dropout node, in topological order.
pub fn check_guidelines(g: &ModelGraph) -> Vec<Diagnostic> {
    let blocks = detect_blocks(g);
    let labeled = classify_with_context(g, &blocks);
    let group_size = |ctx: Context| match ctx {
        Context::Branch(_) | Context::Head => labeled.iter().filter(|(_, _, c)| *c == ctx).count(),
        _ => 1,
    };
    labeled
        .iter()
        .map(|&(v, label, ctx)| {
            let (mut verdict, mut rule, base) = position_verdict(label);
            let mut message = match ctx {
                Context::Branch(b) | Context::Trunk(b) => format!("{base} (block {b})"),
                Context::Skip(b) => format!("dropout on the skip path of block {b}"),
                Context::Head => format!("{base} (head)"),
                Context::Unmatched => base.to_string(),
            };
            let n = group_size(ctx);
            if n > 1 {
                message.push_str(&format!("; {n} dropouts where one is recommended"));
                if verdict < Verdict::Fail {
                    verdict = verdict.max(Verdict::Warn);
                    rule = Rule::MultipleDropout;
                }
            }
            Diagnostic {
                node: g.id(v).to_string(),
                label,
                verdict,
                rule,
                message,
            }
        })
        .collect()
}

/// 0 when nothing fails, 1 otherwise.
pub fn exit_code(diagnostics: &[Diagnostic]) -> i32 {
    if diagnostics.iter().any(|d| d.verdict == Verdict::Fail) {
        1
    } else {
        0
    }
}

pub fn render_text(diagnostics: &[Diagnostic]) -> String {
    diagnostics.iter().map(|d| format!("{d}\n")).collect()
}

pub fn render_json_lines(diagnostics: &[Diagnostic]) -> String {
    diagnostics
        .iter()
        .map(|d| serde_json::to_string(d).expect("diagnostic serializes") + "\n")
        .collect()
}

pub fn lint_file(path: &Path) -> Result<Vec<Diagnostic>, LintError> {
    let text = std::fs::read_to_string(path).map_err(|source| LintError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(check_guidelines(&parse_model_graph(&text)?))
}
