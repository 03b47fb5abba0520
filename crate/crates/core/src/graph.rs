//! Hierarchical latent DAGs: latent, observable and exogenous nodes, with
//! reachability, d-separation and level queries.
//!
//! Nodes are stored in canonical [`NodeId`] order, so every derived quantity
//! (dimension assignment, enumeration order, file output) is independent of
//! the order in which nodes and edges were supplied.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prefix of synthesized exogenous parents.
pub const EXOGENOUS_PREFIX: &str = "eps_";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("empty node id")]
    EmptyId,
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("node `{0}` is not latent")]
    NotLatent(String),
    #[error("node sets overlap at `{0}`")]
    OverlappingSets(String),
    #[error("graph contains a cycle through `{0}`")]
    Cyclic(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("exogenous node `{0}` has no dimension entry or a zero dimension")]
    BadDimension(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("graph file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Opaque node label, ordered "naturally" so that `z2 < z10`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Id of the exogenous parent synthesized for `self`.
    pub fn exogenous(&self) -> NodeId {
        NodeId(format!("{EXOGENOUS_PREFIX}{}", self.0))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        natural_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Compares strings chunk-wise, treating runs of ASCII digits as numbers.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (na, nb) = (&a[..da], &b[..db]);
                let ta = trim_zeros(na);
                let tb = trim_zeros(nb);
                let ord = ta
                    .len()
                    .cmp(&tb.len())
                    .then_with(|| ta.cmp(tb))
                    .then_with(|| na.len().cmp(&nb.len()));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let skip = digits.iter().take_while(|&&c| c == b'0').count();
    &digits[skip..]
}

pub type NodeSet = BTreeSet<NodeId>;

/// Builds a [`NodeSet`] from string labels.
pub fn node_set<I, S>(ids: I) -> NodeSet
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    ids.into_iter().map(|s| NodeId::new(s.as_ref())).collect()
}

/// Per-node dimensions keyed by id.
pub type DimMap = BTreeMap<NodeId, usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Latent,
    Observable,
    Exogenous,
}

/// One broken invariant found by [`LatentGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Cycle { witness: Vec<NodeId> },
    ObservableToObservable { from: NodeId, to: NodeId },
    ObservableHasOutEdge { from: NodeId, to: NodeId },
    MissingExogenousParent { node: NodeId },
    MultipleExogenousParents { node: NodeId, count: usize },
    ExogenousHasParent { node: NodeId, parent: NodeId },
    ExogenousOutDegree { node: NodeId, degree: usize },
    LayoutMismatch { missing: Vec<NodeId>, unexpected: Vec<NodeId>, duplicated: Vec<NodeId> },
}

impl Violation {
    /// Short category label, e.g. `"cycle"`.
    pub fn label(&self) -> &'static str {
        match self {
            Violation::Cycle { .. } => "cycle",
            Violation::ObservableToObservable { .. } => "edge between observables",
            Violation::ObservableHasOutEdge { .. } => "observable has out-edge",
            Violation::MissingExogenousParent { .. } => "missing exogenous parent",
            Violation::MultipleExogenousParents { .. } => "multiple exogenous parents",
            Violation::ExogenousHasParent { .. } => "exogenous node has a parent",
            Violation::ExogenousOutDegree { .. } => "exogenous out-degree is not 1",
            Violation::LayoutMismatch { .. } => "layout mismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[NodeId]| v.iter().map(NodeId::as_str).collect::<Vec<_>>().join(", ");
        match self {
            Violation::Cycle { witness } => {
                let path = witness.iter().map(NodeId::as_str).collect::<Vec<_>>().join(" -> ");
                write!(f, "cycle: {path}")
            }
            Violation::ObservableToObservable { from, to } => {
                write!(f, "edge between observables: {from} -> {to}")
            }
            Violation::ObservableHasOutEdge { from, to } => {
                write!(f, "observable has out-edge: {from} -> {to}")
            }
            Violation::MissingExogenousParent { node } => {
                write!(f, "missing exogenous parent: {node}")
            }
            Violation::MultipleExogenousParents { node, count } => {
                write!(f, "multiple exogenous parents: {node} has {count}")
            }
            Violation::ExogenousHasParent { node, parent } => {
                write!(f, "exogenous node has a parent: {parent} -> {node}")
            }
            Violation::ExogenousOutDegree { node, degree } => {
                write!(f, "exogenous out-degree is not 1: {node} has {degree}")
            }
            Violation::LayoutMismatch { missing, unexpected, duplicated } => write!(
                f,
                "layout mismatch: missing [{}], unexpected [{}], duplicated [{}]",
                join(missing),
                join(unexpected),
                join(duplicated)
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, label: &str) -> bool {
        self.violations.iter().any(|v| v.label() == label)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// On-disk representation of a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<(NodeId, NodeId)>,
    pub layout: Vec<NodeId>,
    #[serde(default = "default_true")]
    pub implicit_exogenous: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: NodeId,
    pub kind: NodeKind,
}

/// The data-generating DAG.
///
/// Construction only rejects malformed input (unknown ids, duplicates); the
/// structural invariants are checked by [`LatentGraph::validate`] so that
/// broken graphs can still be loaded and diagnosed.
#[derive(Clone, Debug)]
pub struct LatentGraph {
    ids: Vec<NodeId>,
    kinds: Vec<NodeKind>,
    index: HashMap<String, usize>,
    // parent lists in canonical order: non-exogenous by id, exogenous last
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    layout: Vec<NodeId>,
}

impl PartialEq for LatentGraph {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
            && self.kinds == other.kinds
            && self.parents == other.parents
            && self.layout == other.layout
    }
}

impl LatentGraph {
    /// Builds a graph from explicit nodes, edges and pixel layout.
    pub fn new<E>(
        nodes: impl IntoIterator<Item = (NodeId, NodeKind)>,
        edges: impl IntoIterator<Item = E>,
        layout: impl IntoIterator<Item = NodeId>,
    ) -> Result<Self, GraphError>
    where
        E: Into<(NodeId, NodeId)>,
    {
        let mut nodes: Vec<(NodeId, NodeKind)> = nodes.into_iter().collect();
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        for w in nodes.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GraphError::DuplicateNode(w[0].0.to_string()));
            }
        }
        if nodes.iter().any(|(id, _)| id.as_str().is_empty()) {
            return Err(GraphError::EmptyId);
        }
        let ids: Vec<NodeId> = nodes.iter().map(|(id, _)| id.clone()).collect();
        let kinds: Vec<NodeKind> = nodes.iter().map(|(_, k)| *k).collect();
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.0.clone(), i)).collect();

        let n = ids.len();
        let mut edge_set = BTreeSet::new();
        for e in edges {
            let (a, b) = e.into();
            let pa = *index.get(a.as_str()).ok_or_else(|| GraphError::UnknownNode(a.to_string()))?;
            let ch = *index.get(b.as_str()).ok_or_else(|| GraphError::UnknownNode(b.to_string()))?;
            if !edge_set.insert((pa, ch)) {
                return Err(GraphError::DuplicateEdge(a.to_string(), b.to_string()));
            }
        }
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(p, c) in &edge_set {
            parents[c].push(p);
            children[p].push(c);
        }
        for list in parents.iter_mut() {
            list.sort_by_key(|&p| (kinds[p] == NodeKind::Exogenous, p));
        }
        for list in children.iter_mut() {
            list.sort_unstable();
        }

        let layout: Vec<NodeId> = layout.into_iter().collect();
        for id in &layout {
            if !index.contains_key(id.as_str()) {
                return Err(GraphError::UnknownNode(id.to_string()));
            }
        }
        Ok(LatentGraph { ids, kinds, index, parents, children, layout })
    }

    /// Builds a graph from its file representation, synthesizing `eps_<id>`
    /// parents when `implicit_exogenous` is set.
    pub fn from_graph_file(file: GraphFile) -> Result<Self, GraphError> {
        let mut nodes: Vec<(NodeId, NodeKind)> =
            file.nodes.iter().map(|n| (n.id.clone(), n.kind)).collect();
        let mut edges = file.edges.clone();
        if file.implicit_exogenous {
            let kinds: HashMap<&NodeId, NodeKind> =
                file.nodes.iter().map(|n| (&n.id, n.kind)).collect();
            let has_exo: BTreeSet<&NodeId> = file
                .edges
                .iter()
                .filter(|(p, _)| kinds.get(p) == Some(&NodeKind::Exogenous))
                .map(|(_, c)| c)
                .collect();
            for n in &file.nodes {
                if n.kind != NodeKind::Exogenous && !has_exo.contains(&n.id) {
                    let eps = n.id.exogenous();
                    nodes.push((eps.clone(), NodeKind::Exogenous));
                    edges.push((eps, n.id.clone()));
                }
            }
        }
        LatentGraph::new(nodes, edges, file.layout)
    }

    pub fn from_json_str(s: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(s)?;
        LatentGraph::from_graph_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        LatentGraph::from_json_str(&text)
    }

    /// File representation with every exogenous node spelled out.
    pub fn to_graph_file(&self) -> GraphFile {
        GraphFile {
            nodes: self
                .ids
                .iter()
                .zip(&self.kinds)
                .map(|(id, &kind)| NodeEntry { id: id.clone(), kind })
                .collect(),
            edges: self.edges().collect(),
            layout: self.layout.clone(),
            implicit_exogenous: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn kind(&self, id: &str) -> Result<NodeKind, GraphError> {
        Ok(self.kinds[self.idx(id)?])
    }

    /// All nodes in canonical order.
    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, NodeKind)> + '_ {
        self.ids.iter().zip(self.kinds.iter().copied())
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = &NodeId> + '_ {
        self.nodes().filter(move |(_, k)| *k == kind).map(|(id, _)| id)
    }

    pub fn latents(&self) -> Vec<NodeId> {
        self.nodes_of(NodeKind::Latent).cloned().collect()
    }

    pub fn observables(&self) -> Vec<NodeId> {
        self.nodes_of(NodeKind::Observable).cloned().collect()
    }

    /// Edges as (parent, child), ordered by canonical indices.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.children.iter().enumerate().flat_map(move |(p, cs)| {
            cs.iter().map(move |&c| (self.ids[p].clone(), self.ids[c].clone()))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    /// Observable pixel order used for mask sampling and data layout.
    pub fn layout(&self) -> &[NodeId] {
        &self.layout
    }

    /// Checks every structural invariant and lists all violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if let Some(witness) = self.find_cycle() {
            violations.push(Violation::Cycle {
                witness: witness.into_iter().map(|i| self.ids[i].clone()).collect(),
            });
        }
        for (p, cs) in self.children.iter().enumerate() {
            if self.kinds[p] != NodeKind::Observable {
                continue;
            }
            for &c in cs {
                let (from, to) = (self.ids[p].clone(), self.ids[c].clone());
                if self.kinds[c] == NodeKind::Observable {
                    violations.push(Violation::ObservableToObservable {
                        from: from.clone(),
                        to: to.clone(),
                    });
                }
                violations.push(Violation::ObservableHasOutEdge { from, to });
            }
        }
        for v in 0..self.ids.len() {
            match self.kinds[v] {
                NodeKind::Exogenous => {
                    for &p in &self.parents[v] {
                        violations.push(Violation::ExogenousHasParent {
                            node: self.ids[v].clone(),
                            parent: self.ids[p].clone(),
                        });
                    }
                    let degree = self.children[v].len();
                    if degree != 1 {
                        violations.push(Violation::ExogenousOutDegree {
                            node: self.ids[v].clone(),
                            degree,
                        });
                    }
                }
                _ => {
                    let count = self.parents[v]
                        .iter()
                        .filter(|&&p| self.kinds[p] == NodeKind::Exogenous)
                        .count();
                    match count {
                        1 => {}
                        0 => violations
                            .push(Violation::MissingExogenousParent { node: self.ids[v].clone() }),
                        _ => violations.push(Violation::MultipleExogenousParents {
                            node: self.ids[v].clone(),
                            count,
                        }),
                    }
                }
            }
        }
        let observables: NodeSet = self.nodes_of(NodeKind::Observable).cloned().collect();
        let mut seen = NodeSet::new();
        let mut duplicated = Vec::new();
        for id in &self.layout {
            if !seen.insert(id.clone()) {
                duplicated.push(id.clone());
            }
        }
        let missing: Vec<NodeId> = observables.difference(&seen).cloned().collect();
        let unexpected: Vec<NodeId> = seen.difference(&observables).cloned().collect();
        if !missing.is_empty() || !unexpected.is_empty() || !duplicated.is_empty() {
            violations.push(Violation::LayoutMismatch { missing, unexpected, duplicated });
        }
        ValidationReport { violations }
    }

    /// Fails with [`GraphError::Invalid`] unless every invariant holds.
    pub fn ensure_valid(&self) -> Result<(), GraphError> {
        let report = self.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(GraphError::Invalid(report.to_string()))
        }
    }

    /// Direct parents of `v`, including its exogenous parent.
    pub fn parents(&self, v: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(v)?;
        Ok(self.to_set(self.parents[i].iter().copied()))
    }

    /// Parents in canonical concatenation order (by id, exogenous last).
    pub fn parents_ordered(&self, v: &str) -> Result<Vec<NodeId>, GraphError> {
        let i = self.idx(v)?;
        Ok(self.parents[i].iter().map(|&p| self.ids[p].clone()).collect())
    }

    pub fn children(&self, v: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(v)?;
        Ok(self.to_set(self.children[i].iter().copied()))
    }

    /// The unique exogenous parent of `v`, if any.
    pub fn exogenous_parent(&self, v: &str) -> Result<Option<NodeId>, GraphError> {
        let i = self.idx(v)?;
        Ok(self.parents[i]
            .iter()
            .find(|&&p| self.kinds[p] == NodeKind::Exogenous)
            .map(|&p| self.ids[p].clone()))
    }

    /// Proper ancestors of `v`.
    pub fn ancestors(&self, v: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(v)?;
        let mut marks = self.reach(&[i], Direction::Up);
        marks[i] = false;
        Ok(self.marked(&marks))
    }

    /// Proper descendants of `v`.
    pub fn descendants(&self, v: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(v)?;
        let mut marks = self.reach(&[i], Direction::Down);
        marks[i] = false;
        Ok(self.marked(&marks))
    }

    /// True iff a directed path of length at least one leads from `v` to some target.
    pub fn is_ancestor_of_any(&self, v: &str, targets: &NodeSet) -> Result<bool, GraphError> {
        let i = self.idx(v)?;
        let targets = self.indices(targets)?;
        let desc = self.strict_reach(&[i], Direction::Down);
        Ok(targets.iter().any(|&t| desc[t]))
    }

    /// Nodes other than `src` lying on a directed path from `src` to a target.
    pub fn directed_path_nodes(&self, src: &str, targets: &NodeSet) -> Result<NodeSet, GraphError> {
        let s = self.idx(src)?;
        let t = self.indices(targets)?;
        let marks = self.directed_path_marks(s, &t);
        Ok(self.marked(&marks))
    }

    /// d-separation of `a` and `b` given `z`, via the reachable-set
    /// ("Bayes ball") traversal.
    pub fn d_separated(&self, a: &NodeSet, b: &NodeSet, z: &NodeSet) -> Result<bool, GraphError> {
        for (x, y) in [(a, b), (a, z), (b, z)] {
            if let Some(common) = x.intersection(y).next() {
                return Err(GraphError::OverlappingSets(common.to_string()));
            }
        }
        let a = self.indices(a)?;
        let b = self.indices(b)?;
        let z = self.indices(z)?;
        let reached = self.d_connected_from(&a, &z);
        Ok(b.iter().all(|&v| !reached[v]))
    }

    /// Longest directed path from latent `v` to any observable.
    ///
    /// A latent with no observable descendant has level 0.
    pub fn topo_depth(&self, v: &str) -> Result<usize, GraphError> {
        let i = self.idx(v)?;
        if self.kinds[i] != NodeKind::Latent {
            return Err(GraphError::NotLatent(v.to_owned()));
        }
        Ok(self.levels()?[i].unwrap_or(0))
    }

    /// Nodes in a topological order (parents before children), ties broken by
    /// canonical index.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        Ok(self.topo_indices()?.into_iter().map(|i| self.ids[i].clone()).collect())
    }

    /// Node dimensions by the additive rule: every non-exogenous node has the
    /// summed dimension of its parents. Exogenous dimensions default to 1.
    pub fn additive_dims(&self, exo_dims: &DimMap) -> Result<DimMap, GraphError> {
        let dims = self.additive_dims_idx(exo_dims)?;
        Ok(self.ids.iter().cloned().zip(dims).collect())
    }

    // ---- index-level helpers shared with the locate and scm modules ----

    pub(crate) fn idx(&self, id: &str) -> Result<usize, GraphError> {
        self.index.get(id).copied().ok_or_else(|| GraphError::UnknownNode(id.to_owned()))
    }

    pub(crate) fn id(&self, i: usize) -> &NodeId {
        &self.ids[i]
    }

    pub(crate) fn kind_at(&self, i: usize) -> NodeKind {
        self.kinds[i]
    }

    pub(crate) fn parents_at(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub(crate) fn indices(&self, set: &NodeSet) -> Result<Vec<usize>, GraphError> {
        set.iter().map(|id| self.idx(id.as_str())).collect()
    }

    pub(crate) fn to_set(&self, it: impl IntoIterator<Item = usize>) -> NodeSet {
        it.into_iter().map(|i| self.ids[i].clone()).collect()
    }

    pub(crate) fn marked(&self, marks: &[bool]) -> NodeSet {
        self.to_set(marks.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i))
    }

    /// Nodes reachable from `start` (start included).
    pub(crate) fn reach(&self, start: &[usize], dir: Direction) -> Vec<bool> {
        let mut marks = vec![false; self.ids.len()];
        let mut stack: Vec<usize> = start.to_vec();
        for &s in start {
            marks[s] = true;
        }
        while let Some(v) = stack.pop() {
            let next = match dir {
                Direction::Up => &self.parents[v],
                Direction::Down => &self.children[v],
            };
            for &w in next {
                if !marks[w] {
                    marks[w] = true;
                    stack.push(w);
                }
            }
        }
        marks
    }

    /// Nodes reachable from `start` by paths of length >= 1.
    pub(crate) fn strict_reach(&self, start: &[usize], dir: Direction) -> Vec<bool> {
        let first: Vec<usize> = start
            .iter()
            .flat_map(|&s| match dir {
                Direction::Up => self.parents[s].iter(),
                Direction::Down => self.children[s].iter(),
            })
            .copied()
            .collect();
        self.reach(&first, dir)
    }

    pub(crate) fn directed_path_marks(&self, src: usize, targets: &[usize]) -> Vec<bool> {
        let desc = self.strict_reach(&[src], Direction::Down);
        let up = self.reach(targets, Direction::Up);
        desc.iter().zip(&up).enumerate().map(|(i, (&d, &u))| d && u && i != src).collect()
    }

    /// Nodes d-connected to `a` given `z` (excluding members of `z`).
    pub(crate) fn d_connected_from(&self, a: &[usize], z: &[usize]) -> Vec<bool> {
        let n = self.ids.len();
        let mut in_z = vec![false; n];
        for &v in z {
            in_z[v] = true;
        }
        let z_anc = self.reach(z, Direction::Up);
        // visited[(v, came_from_child)]
        let mut visited = vec![[false; 2]; n];
        let mut reached = vec![false; n];
        let mut queue: VecDeque<(usize, bool)> = a.iter().map(|&v| (v, true)).collect();
        while let Some((v, up)) = queue.pop_front() {
            if visited[v][up as usize] {
                continue;
            }
            visited[v][up as usize] = true;
            if !in_z[v] {
                reached[v] = true;
            }
            if up {
                if !in_z[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, true)));
                    queue.extend(self.children[v].iter().map(|&c| (c, false)));
                }
            } else {
                if !in_z[v] {
                    queue.extend(self.children[v].iter().map(|&c| (c, false)));
                }
                if z_anc[v] {
                    queue.extend(self.parents[v].iter().map(|&p| (p, true)));
                }
            }
        }
        reached
    }

    pub(crate) fn topo_indices(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.ids.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&v| indeg[v] > 0).expect("a node on a cycle");
            return Err(GraphError::Cyclic(self.ids[stuck].to_string()));
        }
        Ok(order)
    }

    /// Level of every node: `Some(0)` for observables, longest path to an
    /// observable for the rest, `None` when no observable is reachable.
    pub(crate) fn levels(&self) -> Result<Vec<Option<usize>>, GraphError> {
        let order = self.topo_indices()?;
        let mut level: Vec<Option<usize>> = vec![None; self.ids.len()];
        for &v in order.iter().rev() {
            if self.kinds[v] == NodeKind::Observable {
                level[v] = Some(0);
                continue;
            }
            level[v] = self.children[v].iter().filter_map(|&c| level[c]).max().map(|l| l + 1);
        }
        Ok(level)
    }

    pub(crate) fn additive_dims_idx(&self, exo_dims: &DimMap) -> Result<Vec<usize>, GraphError> {
        for (id, &d) in exo_dims {
            let i = self.idx(id.as_str())?;
            if self.kinds[i] != NodeKind::Exogenous || d == 0 {
                return Err(GraphError::BadDimension(id.to_string()));
            }
        }
        let mut dims = vec![0usize; self.ids.len()];
        for v in self.topo_indices()? {
            dims[v] = match self.kinds[v] {
                NodeKind::Exogenous => exo_dims.get(&self.ids[v]).copied().unwrap_or(1),
                _ => self.parents[v].iter().map(|&p| dims[p]).sum(),
            };
        }
        Ok(dims)
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        // iterative three-colour DFS; returns the first back-edge cycle
        let n = self.ids.len();
        let mut colour = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if colour[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            colour[root] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < self.children[v].len() {
                    let c = self.children[v][*next];
                    *next += 1;
                    match colour[c] {
                        0 => {
                            colour[c] = 1;
                            parent[c] = v;
                            stack.push((c, 0));
                        }
                        1 => {
                            let mut cycle = vec![v];
                            let mut u = v;
                            while u != c {
                                u = parent[u];
                                cycle.push(u);
                            }
                            cycle.reverse();
                            cycle.push(c);
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    colour[v] = 2;
                    stack.pop();
                }
            }
        }
        None
    }
}

/// The masked observables of one mask; everything else in the layout is visible.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    masked: NodeSet,
}

impl Mask {
    /// Checks that every masked id is an observable of `g`.
    pub fn new(g: &LatentGraph, masked: NodeSet) -> Result<Self, GraphError> {
        for id in &masked {
            if g.kind(id.as_str())? != NodeKind::Observable {
                return Err(GraphError::Invalid(format!("masked node `{id}` is not observable")));
            }
        }
        Ok(Mask { masked })
    }

    /// For ids already known to be observables.
    pub(crate) fn trusted(masked: NodeSet) -> Self {
        Mask { masked }
    }

    /// Parses a comma separated list such as `"x1,x2,x3"`.
    pub fn parse(g: &LatentGraph, list: &str) -> Result<Self, GraphError> {
        let ids = list.split(',').map(str::trim).filter(|s| !s.is_empty());
        Mask::new(g, node_set(ids))
    }

    pub fn masked(&self) -> &NodeSet {
        &self.masked
    }

    pub fn is_masked(&self, id: &str) -> bool {
        self.masked.contains(&NodeId::from(id))
    }

    /// Observables of `g` that are not masked.
    pub fn visible(&self, g: &LatentGraph) -> NodeSet {
        g.nodes_of(NodeKind::Observable).filter(|id| !self.masked.contains(*id)).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Up,
    Down,
}

/// Shape of a random hierarchy drawn by [`random_latent_graph`].
#[derive(Clone, Debug)]
pub struct RandomGraphParams {
    pub max_latents: usize,
    pub max_observables: usize,
    /// Probability of an edge between two latents (earlier to later).
    pub latent_edge_prob: f64,
    /// Maximum number of latent parents drawn per observable.
    pub max_observable_parents: usize,
}

impl Default for RandomGraphParams {
    fn default() -> Self {
        RandomGraphParams {
            max_latents: 8,
            max_observables: 10,
            latent_edge_prob: 0.3,
            max_observable_parents: 3,
        }
    }
}

/// Draws a valid hierarchical graph: latents `z1..zL` with forward edges,
/// observables `x1..xM` each fed by 1..=k random latents, synthesized
/// exogenous parents and the identity layout.
pub fn random_latent_graph<R: Rng + ?Sized>(rng: &mut R, params: &RandomGraphParams) -> LatentGraph {
    let n_lat = rng.random_range(1..=params.max_latents.max(1));
    let n_obs = rng.random_range(2..=params.max_observables.max(2));
    let z = |i: usize| NodeId(format!("z{}", i + 1));
    let x = |i: usize| NodeId(format!("x{}", i + 1));
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n_lat {
        nodes.push(NodeEntry { id: z(i), kind: NodeKind::Latent });
        for j in (i + 1)..n_lat {
            if rng.random_bool(params.latent_edge_prob) {
                edges.push((z(i), z(j)));
            }
        }
    }
    let max_par = params.max_observable_parents.clamp(1, n_lat);
    for o in 0..n_obs {
        nodes.push(NodeEntry { id: x(o), kind: NodeKind::Observable });
        let k = rng.random_range(1..=max_par);
        for p in sample(rng, n_lat, k) {
            edges.push((z(p), x(o)));
        }
    }
    let file = GraphFile {
        nodes,
        edges,
        layout: (0..n_obs).map(x).collect(),
        implicit_exogenous: true,
    };
    LatentGraph::from_graph_file(file).expect("generated graph is well formed")
}
