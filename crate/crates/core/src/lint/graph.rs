use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LintError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    BN,
    ReLU,
    ELU,
    Weight,
    Dropout,
    Add,
    GAP,
    FC,
    Input,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::BN,
        OpKind::ReLU,
        OpKind::ELU,
        OpKind::Weight,
        OpKind::Dropout,
        OpKind::Add,
        OpKind::GAP,
        OpKind::FC,
        OpKind::Input,
        OpKind::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::BN => "BN",
            OpKind::ReLU => "ReLU",
            OpKind::ELU => "ELU",
            OpKind::Weight => "Weight",
            OpKind::Dropout => "Dropout",
            OpKind::Add => "Add",
            OpKind::GAP => "GAP",
            OpKind::FC => "FC",
            OpKind::Input => "Input",
            OpKind::Output => "Output",
        }
    }

    pub fn is_activation(self) -> bool {
        matches!(self, OpKind::ReLU | OpKind::ELU)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// The on-disk form: `{"nodes": [{"id", "op", "attrs"?}], "edges": [[from, to]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub attrs: BTreeMap<String, serde_json::Value>,
}

/// A validated model graph. Node indices follow document order.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    topo: Vec<usize>,
    /// `rank[v]` = position of `v` in `topo`.
    rank: Vec<usize>,
}

pub fn parse_model_graph(document: &str) -> Result<ModelGraph, LintError> {
    let doc: GraphDocument = serde_json::from_str(document)?;
    ModelGraph::from_document(&doc)
}

impl ModelGraph {
    pub fn from_document(doc: &GraphDocument) -> Result<Self, LintError> {
        let mut index = HashMap::new();
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for spec in &doc.nodes {
            let op = spec.op.parse::<OpKind>().map_err(|op| LintError::UnknownOp {
                node: spec.id.clone(),
                op,
            })?;
            if index.insert(spec.id.clone(), nodes.len()).is_some() {
                return Err(LintError::DuplicateId(spec.id.clone()));
            }
            nodes.push(Node {
                id: spec.id.clone(),
                op,
                attrs: spec.attrs.clone(),
            });
        }
        let n = nodes.len();
        let mut edges = Vec::with_capacity(doc.edges.len());
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (from, to) in &doc.edges {
            let lookup = |id: &String| {
                index.get(id).copied().ok_or_else(|| LintError::DanglingEdge {
                    from: from.clone(),
                    to: to.clone(),
                    missing: id.clone(),
                })
            };
            let (a, b) = (lookup(from)?, lookup(to)?);
            if succs[a].contains(&b) {
                return Err(LintError::DuplicateEdge {
                    from: from.clone(),
                    to: to.clone(),
                });
            }
            edges.push((a, b));
            succs[a].push(b);
            preds[b].push(a);
        }

        if let Some((a, b)) = find_back_edge(&succs) {
            return Err(LintError::Cycle {
                from: nodes[a].id.clone(),
                to: nodes[b].id.clone(),
            });
        }
        for kind in [OpKind::Input, OpKind::Output] {
            let count = nodes.iter().filter(|v| v.op == kind).count();
            if count != 1 {
                return Err(LintError::Terminal { kind, count });
            }
        }
        for (v, node) in nodes.iter().enumerate() {
            let expected = match node.op {
                OpKind::Input => 0,
                OpKind::Add => 2,
                _ => 1,
            };
            if preds[v].len() != expected {
                return Err(LintError::Arity {
                    node: node.id.clone(),
                    op: node.op,
                    expected,
                    actual: preds[v].len(),
                });
            }
        }
        if let Some(v) = nodes.iter().position(|v| v.op == OpKind::Output).filter(|&v| !succs[v].is_empty()) {
            return Err(LintError::OutputHasSuccessor(nodes[v].id.clone()));
        }

        // Kahn's algorithm; ties broken by document order.
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            topo.push(v);
            for &s in &succs[v] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        let mut rank = vec![0; n];
        for (i, &v) in topo.iter().enumerate() {
            rank[v] = i;
        }
        Ok(ModelGraph {
            nodes,
            edges,
            preds,
            succs,
            topo,
            rank,
        })
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: self
                .nodes
                .iter()
                .map(|v| NodeSpec {
                    id: v.id.clone(),
                    op: v.op.name().to_string(),
                    attrs: v.attrs.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| (self.nodes[a].id.clone(), self.nodes[b].id.clone()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph document serializes")
    }

    /// Same node ids, ops, attributes and edges, regardless of listing order.
    pub fn structurally_eq(&self, other: &ModelGraph) -> bool {
        let key = |g: &ModelGraph| {
            let mut nodes: Vec<_> = g.nodes.iter().map(|v| (v.id.clone(), v.op, v.attrs.clone())).collect();
            nodes.sort_by(|a, b| a.0.cmp(&b.0));
            let mut edges = g.to_document().edges;
            edges.sort();
            (nodes, edges)
        };
        key(self) == key(other)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn op(&self, v: usize) -> OpKind {
        self.nodes[v].op
    }

    pub fn id(&self, v: usize) -> &str {
        &self.nodes[v].id
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|v| v.id == id)
    }

    pub fn preds(&self, v: usize) -> &[usize] {
        &self.preds[v]
    }

    pub fn succs(&self, v: usize) -> &[usize] {
        &self.succs[v]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Node indices in topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn rank(&self, v: usize) -> usize {
        self.rank[v]
    }

    /// `anc[v][u]` is true when `u` reaches `v` (every node reaches itself).
    pub(crate) fn ancestor_table(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        let mut anc = vec![vec![false; n]; n];
        for &v in &self.topo {
            anc[v][v] = true;
            for &p in &self.preds[v] {
                let src = anc[p].clone();
                for (dst, s) in anc[v].iter_mut().zip(src) {
                    *dst |= s;
                }
            }
        }
        anc
    }
}

/// Iterative DFS; returns the first edge found that closes a cycle.
fn find_back_edge(succs: &[Vec<usize>]) -> Option<(usize, usize)> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let n = succs.len();
    let mut mark = vec![Mark::New; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Open;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&s) = succs[v].get(*next) {
                *next += 1;
                match mark[s] {
                    Mark::Open => return Some((v, s)),
                    Mark::New => {
                        mark[s] = Mark::Open;
                        stack.push((s, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}
