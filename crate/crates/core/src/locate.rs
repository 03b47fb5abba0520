//! Locating the information shared between the masked and the visible part
//! of the observables.
//!
//! [`locate_c`] runs the two-stage search (selection by backtracking from the
//! masked observables, then pruning against the visible set), [`locate_smc`]
//! finds one admissible visible-specific set, and [`verify_conditions`]
//! checks the resulting triple against the invertibility, independence and
//! minimality conditions. [`brute_force_minimal_c`] is an exhaustive oracle
//! that shares none of the search logic.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Direction, DimMap, GraphError, LatentGraph, Mask, NodeKind, NodeSet};

/// Default latent-count cap for the exhaustive oracle.
pub const DEFAULT_ORACLE_CAP: usize = 12;

#[derive(Debug, Error)]
pub enum LocateError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask leaves no visible observable")]
    EmptyVisible,
    #[error("`{0}` in c is not a latent node")]
    NotLatent(String),
    #[error("graph has {count} latents, oracle cap is {cap}")]
    TooManyLatents { count: usize, cap: usize },
    #[error("shared-information invariant broken: {0}")]
    Conflict(String),
    #[error("no latent subset satisfies the conditions")]
    NoSolution,
}

/// The triple `(c, s_m, s_mc)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SharedInfo {
    pub c: NodeSet,
    pub s_m: NodeSet,
    pub s_mc: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConditionReport {
    pub invertible_masked: bool,
    pub invertible_visible: bool,
    pub recoverable_from_masked: bool,
    pub independence_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimal_ok: Option<bool>,
    pub total_dim_c: usize,
    pub witnesses: Vec<String>,
}

impl ConditionReport {
    /// The four structural flags, ignoring minimality.
    pub fn structural_ok(&self) -> bool {
        self.invertible_masked
            && self.invertible_visible
            && self.recoverable_from_masked
            && self.independence_ok
    }

    /// Structural flags plus minimality when it was checked.
    pub fn all_ok(&self) -> bool {
        self.structural_ok() && self.minimal_ok.unwrap_or(true)
    }
}

/// Output of the selection stage, before pruning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub candidates: NodeSet,
    pub s_m: NodeSet,
}

/// Result of the exhaustive minimality search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MinimalC {
    pub c: NodeSet,
    pub s_m: NodeSet,
    pub total_dim: usize,
    /// Other satisfying sets with the same total dimension, if any.
    pub ties: Vec<NodeSet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LevelStats {
    pub max_level: usize,
    pub mean_level: f64,
    pub total_dim: usize,
}

fn split_mask(g: &LatentGraph, mask: &Mask) -> Result<(Vec<usize>, Vec<usize>), LocateError> {
    let masked = g.indices(mask.masked())?;
    let visible = g.indices(&mask.visible(g))?;
    if masked.is_empty() {
        return Err(LocateError::EmptyMask);
    }
    if visible.is_empty() {
        return Err(LocateError::EmptyVisible);
    }
    Ok((masked, visible))
}

/// Selection stage: backtrack from every masked observable, collecting
/// exogenous parents into `s_m` and stopping at latents that are ancestors of
/// the visible part.
pub fn selection_stage(g: &LatentGraph, mask: &Mask) -> Result<Selection, LocateError> {
    let (masked, visible) = split_mask(g, mask)?;
    let ancestor_of_visible = g.strict_reach(&visible, Direction::Up);
    let mut visited = vec![false; g.node_count()];
    let mut candidates = BTreeSet::new();
    let mut s_m = BTreeSet::new();
    for &x in &masked {
        let mut frontier = vec![x];
        visited[x] = true;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for v in frontier {
                for &p in g.parents_at(v) {
                    if visited[p] {
                        continue;
                    }
                    visited[p] = true;
                    if g.kind_at(p) == NodeKind::Exogenous {
                        s_m.insert(p);
                    } else if ancestor_of_visible[p] {
                        candidates.insert(p);
                    } else {
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
    }
    Ok(Selection { candidates: g.to_set(candidates), s_m: g.to_set(s_m) })
}

/// Pruning stage: drop every candidate that has another candidate on one of
/// its directed paths to the visible set. All tests are made against the
/// unpruned set.
pub fn prune(g: &LatentGraph, mask: &Mask, candidates: &NodeSet) -> Result<NodeSet, LocateError> {
    let visible = g.indices(&mask.visible(g))?;
    let cand = g.indices(candidates)?;
    let keep = cand.iter().copied().filter(|&d| {
        let on_path = g.directed_path_marks(d, &visible);
        !cand.iter().any(|&other| other != d && on_path[other])
    });
    Ok(g.to_set(keep))
}

/// Minimal shared latent set `c` and masked-specific exogenous set `s_m`.
pub fn locate_c(g: &LatentGraph, mask: &Mask) -> Result<(NodeSet, NodeSet), LocateError> {
    g.ensure_valid()?;
    let sel = selection_stage(g, mask)?;
    let c = prune(g, mask, &sel.candidates)?;
    Ok((c, sel.s_m))
}

/// One admissible visible-specific set for a given `c`.
///
/// Backtracks from each visible observable. A node with a parent in `c`
/// contributes all its other parents (exogenous or latent "spouses") and is
/// not backtracked further; otherwise exogenous parents are collected and
/// latent parents backtracked.
pub fn locate_smc(g: &LatentGraph, mask: &Mask, c: &NodeSet) -> Result<NodeSet, LocateError> {
    let (masked, visible) = split_mask(g, mask)?;
    let c_idx = g.indices(c)?;
    let mut in_c = vec![false; g.node_count()];
    for &v in &c_idx {
        if g.kind_at(v) != NodeKind::Latent {
            return Err(LocateError::NotLatent(g.id(v).to_string()));
        }
        in_c[v] = true;
    }

    let mut visited = vec![false; g.node_count()];
    let mut s_mc = vec![false; g.node_count()];
    for &x in &visible {
        let mut frontier = vec![x];
        visited[x] = true;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for v in frontier {
                let parents = g.parents_at(v);
                if parents.iter().any(|&p| in_c[p]) {
                    for &p in parents.iter().filter(|&&p| !in_c[p]) {
                        s_mc[p] = true;
                    }
                    continue;
                }
                for &p in parents {
                    if g.kind_at(p) == NodeKind::Exogenous {
                        s_mc[p] = true;
                    } else if !visited[p] {
                        visited[p] = true;
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
    }

    // masked-specific exogenous information: exogenous ancestors of the
    // masked part that `c` does not already account for
    let exo_masked = g.strict_reach(&masked, Direction::Up);
    let explained = g.reach(&c_idx, Direction::Up);
    let clash: Vec<String> = (0..g.node_count())
        .filter(|&v| {
            s_mc[v] && g.kind_at(v) == NodeKind::Exogenous && exo_masked[v] && !explained[v]
        })
        .map(|v| g.id(v).to_string())
        .collect();
    if !clash.is_empty() {
        return Err(LocateError::Conflict(format!(
            "s_mc shares masked-specific exogenous nodes [{}]",
            clash.join(", ")
        )));
    }
    Ok(g.marked(&s_mc))
}

/// Runs [`locate_c`] and [`locate_smc`].
pub fn locate(g: &LatentGraph, mask: &Mask) -> Result<SharedInfo, LocateError> {
    let (c, s_m) = locate_c(g, mask)?;
    let s_mc = locate_smc(g, mask, &c)?;
    Ok(SharedInfo { c, s_m, s_mc })
}

/// Everything determined by `known` through module inversion (a node's
/// value determines its parents) and forward evaluation (a node with all
/// parents known is known). Nodes without parents are only reached by
/// inversion.
pub fn information_closure(g: &LatentGraph, known: &NodeSet) -> Result<NodeSet, LocateError> {
    let start = g.indices(known)?;
    Ok(g.marked(&closure_marks(g, &start)))
}

pub(crate) fn closure_marks(g: &LatentGraph, start: &[usize]) -> Vec<bool> {
    let n = g.node_count();
    let mut known = vec![false; n];
    for &v in start {
        known[v] = true;
    }
    loop {
        let mut changed = false;
        for v in 0..n {
            if known[v] {
                for &p in g.parents_at(v) {
                    if !known[p] {
                        known[p] = true;
                        changed = true;
                    }
                }
            } else {
                let parents = g.parents_at(v);
                if !parents.is_empty() && parents.iter().all(|&p| known[p]) {
                    known[v] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return known;
        }
    }
}

/// Checks a shared-information triple against the structural conditions, and
/// against the exhaustive oracle when node dimensions are supplied.
pub fn verify_conditions(
    g: &LatentGraph,
    mask: &Mask,
    info: &SharedInfo,
    dims: Option<&DimMap>,
) -> Result<ConditionReport, LocateError> {
    let masked = g.indices(mask.masked())?;
    let visible = g.indices(&mask.visible(g))?;
    let c = g.indices(&info.c)?;
    let s_m = g.indices(&info.s_m)?;
    let s_mc = g.indices(&info.s_mc)?;
    let mut witnesses = Vec::new();

    let union = |a: &[usize], b: &[usize]| -> Vec<usize> { a.iter().chain(b).copied().collect() };

    let from_masked_side = closure_marks(g, &union(&c, &s_m));
    let lost_masked: Vec<usize> = masked.iter().copied().filter(|&x| !from_masked_side[x]).collect();
    for &x in &lost_masked {
        witnesses.push(format!("masked observable {} is not determined by c and s_m", g.id(x)));
    }

    let from_visible_side = closure_marks(g, &union(&c, &s_mc));
    let lost_visible: Vec<usize> =
        visible.iter().copied().filter(|&x| !from_visible_side[x]).collect();
    for &x in &lost_visible {
        witnesses.push(format!("visible observable {} is not determined by c and s_mc", g.id(x)));
    }

    let from_masked = closure_marks(g, &masked);
    let unrecoverable: Vec<usize> =
        union(&c, &s_m).into_iter().filter(|&v| !from_masked[v]).collect();
    for &v in &unrecoverable {
        witnesses.push(format!("{} is not recoverable from the masked observables", g.id(v)));
    }

    let mut rest = info.c.clone();
    rest.extend(info.s_mc.iter().cloned());
    let independence_ok = match g.d_separated(&info.s_m, &rest, &NodeSet::new()) {
        Ok(true) => true,
        Ok(false) => {
            let reached = g.d_connected_from(&s_m, &[]);
            let hit: Vec<String> = union(&c, &s_mc)
                .into_iter()
                .filter(|&v| reached[v])
                .map(|v| g.id(v).to_string())
                .collect();
            witnesses.push(format!("s_m is d-connected to [{}]", hit.join(", ")));
            false
        }
        Err(e) => {
            witnesses.push(format!("independence check failed: {e}"));
            false
        }
    };

    let unit_dims;
    let dims_for_total = match dims {
        Some(d) => d,
        None => {
            unit_dims = g.additive_dims(&DimMap::new())?;
            &unit_dims
        }
    };
    let total_dim_c = total_dim(&info.c, dims_for_total, &mut witnesses);

    let minimal_ok = match dims {
        None => None,
        Some(d) => match brute_force_minimal_c(g, mask, d, DEFAULT_ORACLE_CAP) {
            Ok(best) => {
                if best.total_dim != total_dim_c {
                    witnesses.push(format!(
                        "c has total dimension {total_dim_c}, the minimum is {}",
                        best.total_dim
                    ));
                }
                Some(best.total_dim == total_dim_c)
            }
            Err(e) => {
                witnesses.push(format!("minimality not checked: {e}"));
                None
            }
        },
    };

    Ok(ConditionReport {
        invertible_masked: lost_masked.is_empty(),
        invertible_visible: lost_visible.is_empty(),
        recoverable_from_masked: unrecoverable.is_empty(),
        independence_ok,
        minimal_ok,
        total_dim_c,
        witnesses,
    })
}

fn total_dim(set: &NodeSet, dims: &DimMap, witnesses: &mut Vec<String>) -> usize {
    set.iter()
        .map(|id| match dims.get(id) {
            Some(&d) => d,
            None => {
                witnesses.push(format!("no dimension for {id}"));
                0
            }
        })
        .sum()
}

/// Exhaustive search for the latent set of smallest total dimension whose
/// complement exogenous set makes the masked part invertible, recoverable and
/// independent of the rest.
///
/// Subsets are scanned by total dimension, then lexicographically in node
/// order, so the answer is unique; remaining satisfying subsets of the same
/// dimension are reported in `ties`.
pub fn brute_force_minimal_c(
    g: &LatentGraph,
    mask: &Mask,
    dims: &DimMap,
    cap: usize,
) -> Result<MinimalC, LocateError> {
    let (masked, visible) = split_mask(g, mask)?;
    let latents = g.indices(&g.latents().into_iter().collect())?;
    if latents.len() > cap || latents.len() >= 64 {
        return Err(LocateError::TooManyLatents { count: latents.len(), cap });
    }
    let latent_dims: Vec<usize> = latents
        .iter()
        .map(|&v| dims.get(g.id(v)).copied().ok_or_else(|| GraphError::BadDimension(g.id(v).to_string())))
        .collect::<Result<_, _>>()?;

    let ancestors_masked = g.strict_reach(&masked, Direction::Up);
    let exo_masked: Vec<usize> = (0..g.node_count())
        .filter(|&v| ancestors_masked[v] && g.kind_at(v) == NodeKind::Exogenous)
        .collect();
    let from_masked = closure_marks(g, &masked);

    let mut subsets: Vec<(usize, Vec<usize>)> = (0u64..(1u64 << latents.len()))
        .map(|bits| {
            let members: Vec<usize> =
                (0..latents.len()).filter(|&i| bits >> i & 1 == 1).collect();
            let dim = members.iter().map(|&i| latent_dims[i]).sum();
            (dim, members)
        })
        .collect();
    subsets.sort();

    let check = |members: &[usize]| -> Option<Vec<usize>> {
        let cand: Vec<usize> = members.iter().map(|&i| latents[i]).collect();
        let explained = closure_marks(g, &cand);
        let specific: Vec<usize> = exo_masked.iter().copied().filter(|&e| !explained[e]).collect();
        let both: Vec<usize> = cand.iter().chain(&specific).copied().collect();
        let determined = closure_marks(g, &both);
        if !masked.iter().all(|&x| determined[x]) {
            return None;
        }
        if !both.iter().all(|&v| from_masked[v]) {
            return None;
        }
        let reached = g.d_connected_from(&specific, &[]);
        if cand.iter().chain(&visible).any(|&v| reached[v]) {
            return None;
        }
        Some(specific)
    };

    let mut best: Option<MinimalC> = None;
    for (dim, members) in &subsets {
        if let Some(b) = &best {
            if *dim > b.total_dim {
                break;
            }
        }
        let Some(specific) = check(members) else { continue };
        let c = g.to_set(members.iter().map(|&i| latents[i]));
        match &mut best {
            None => {
                best = Some(MinimalC {
                    c,
                    s_m: g.to_set(specific),
                    total_dim: *dim,
                    ties: Vec::new(),
                })
            }
            Some(b) => b.ties.push(c),
        }
    }
    best.ok_or(LocateError::NoSolution)
}

/// Level summary of a latent set; all zeros for the empty set.
pub fn level_stats(g: &LatentGraph, c: &NodeSet, dims: &DimMap) -> Result<LevelStats, LocateError> {
    if c.is_empty() {
        return Ok(LevelStats { max_level: 0, mean_level: 0.0, total_dim: 0 });
    }
    let mut levels = Vec::with_capacity(c.len());
    for id in c {
        levels.push(g.topo_depth(id.as_str())?);
    }
    let mut missing = Vec::new();
    let total_dim = total_dim(c, dims, &mut missing);
    if let Some(m) = missing.first() {
        return Err(LocateError::Conflict(m.clone()));
    }
    Ok(LevelStats {
        max_level: levels.iter().copied().max().unwrap_or(0),
        mean_level: levels.iter().sum::<usize>() as f64 / levels.len() as f64,
        total_dim,
    })
}
