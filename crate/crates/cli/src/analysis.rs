//! Graph-level commands: locating `c` for one mask and checking the search
//! against the exhaustive oracle on many masks.

use latentlab::graph::{random_latent_graph, DimMap, LatentGraph, Mask, NodeKind, NodeSet, RandomGraphParams};
use latentlab::locate::{
    brute_force_minimal_c, level_stats, locate_smc, verify_conditions, ConditionReport, LevelStats,
    LocateError, SharedInfo, DEFAULT_ORACLE_CAP,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct LocateReport {
    pub mask: NodeSet,
    pub c: NodeSet,
    pub s_m: NodeSet,
    pub s_mc: NodeSet,
    pub conditions: ConditionReport,
    pub levels: LevelStats,
}

impl LocateReport {
    pub fn all_ok(&self) -> bool {
        self.conditions.all_ok()
    }
}

fn unit_dims(g: &LatentGraph) -> Result<DimMap> {
    Ok(g.additive_dims(&DimMap::new())?)
}

/// Runs the search, the condition checks and the minimality oracle (when the
/// graph is small enough) under unit exogenous dimensions.
pub fn locate_report(g: &LatentGraph, mask: &Mask) -> Result<LocateReport> {
    let dims = unit_dims(g)?;
    let info = latentlab::locate::locate(g, mask)?;
    let oracle_dims = (g.latents().len() <= DEFAULT_ORACLE_CAP).then_some(&dims);
    let conditions = verify_conditions(g, mask, &info, oracle_dims)?;
    let levels = level_stats(g, &info.c, &dims)?;
    Ok(LocateReport { mask: mask.masked().clone(), c: info.c, s_m: info.s_m, s_mc: info.s_mc, conditions, levels })
}

/// `(c, s_m)` for a mask; [`latentlab::locate::locate_c`] unless a test swaps in something else.
pub type Locator = fn(&LatentGraph, &Mask) -> std::result::Result<(NodeSet, NodeSet), LocateError>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConditionTally {
    pub invertible_masked: usize,
    pub invertible_visible: usize,
    pub recoverable_from_masked: usize,
    pub independence_ok: usize,
    pub all_structural: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifySummary {
    pub trials: usize,
    pub mismatches: usize,
    pub condition_failures: usize,
    /// Number of trials passing each condition.
    pub passing: ConditionTally,
    /// The first few disagreements, for diagnosis.
    pub examples: Vec<String>,
}

impl VerifySummary {
    pub fn ok(&self) -> bool {
        self.mismatches == 0 && self.condition_failures == 0
    }
}

#[derive(Clone, Debug)]
struct Trial {
    mismatch: Option<String>,
    conditions: Option<ConditionReport>,
}

/// A uniformly sized, uniformly drawn mask leaving both sides non-empty.
pub fn random_mask<R: Rng + ?Sized>(g: &LatentGraph, rng: &mut R) -> Mask {
    let obs = g.observables();
    let k = rng.random_range(1..obs.len());
    let picked: NodeSet = sample(rng, obs.len(), k).into_iter().map(|i| obs[i].clone()).collect();
    Mask::new(g, picked).expect("observables are maskable")
}

fn run_trial(g: &LatentGraph, mask: &Mask, locator: Locator) -> Result<Trial> {
    let dims = unit_dims(g)?;
    let oracle = brute_force_minimal_c(g, mask, &dims, DEFAULT_ORACLE_CAP)?;
    let describe = |what: String| format!("mask {:?}: {what}", mask.masked().iter().map(|id| id.as_str()).collect::<Vec<_>>());
    let (c, s_m) = match locator(g, mask) {
        Ok(found) => found,
        Err(e) => return Ok(Trial { mismatch: Some(describe(format!("search failed: {e}"))), conditions: None }),
    };
    let total: usize = c.iter().map(|id| dims[id]).sum();
    let mismatch = (c != oracle.c || total != oracle.total_dim).then(|| {
        describe(format!("search {:?} (dim {total}) vs oracle {:?} (dim {})", ids(&c), ids(&oracle.c), oracle.total_dim))
    });
    let conditions = match locate_smc(g, mask, &c) {
        Ok(s_mc) => Some(verify_conditions(g, mask, &SharedInfo { c, s_m, s_mc }, None)?),
        Err(_) => None,
    };
    Ok(Trial { mismatch, conditions })
}

fn ids(set: &NodeSet) -> Vec<&str> {
    set.iter().map(|id| id.as_str()).collect()
}

fn summarize(trials: Vec<Trial>) -> VerifySummary {
    let mut s = VerifySummary {
        trials: trials.len(),
        mismatches: 0,
        condition_failures: 0,
        passing: ConditionTally::default(),
        examples: Vec::new(),
    };
    for t in trials {
        if let Some(m) = t.mismatch {
            s.mismatches += 1;
            if s.examples.len() < 5 {
                s.examples.push(m);
            }
        }
        match t.conditions {
            Some(r) => {
                s.passing.invertible_masked += r.invertible_masked as usize;
                s.passing.invertible_visible += r.invertible_visible as usize;
                s.passing.recoverable_from_masked += r.recoverable_from_masked as usize;
                s.passing.independence_ok += r.independence_ok as usize;
                if r.structural_ok() {
                    s.passing.all_structural += 1;
                } else {
                    s.condition_failures += 1;
                }
            }
            None => s.condition_failures += 1,
        }
    }
    s
}

/// Trial `i` draws from stream `i` of the generator seeded with `seed`.
fn trial_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Compares `locator` with the oracle on `trials` random masks of `g`.
pub fn verify_graph(g: &LatentGraph, trials: usize, seed: u64, locator: Locator) -> Result<VerifySummary> {
    g.ensure_valid()?;
    let latents = g.nodes_of(NodeKind::Latent).count();
    if latents > DEFAULT_ORACLE_CAP {
        return Err(LocateError::TooManyLatents { count: latents, cap: DEFAULT_ORACLE_CAP }.into());
    }
    let results: Result<Vec<Trial>> = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(g, &random_mask(g, &mut trial_rng(seed, i)), locator))
        .collect();
    Ok(summarize(results?))
}

/// Like [`verify_graph`], drawing a fresh random graph for every trial.
pub fn verify_random_graphs(
    trials: usize,
    seed: u64,
    params: &RandomGraphParams,
    locator: Locator,
) -> Result<VerifySummary> {
    let results: Result<Vec<Trial>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let g = random_latent_graph(&mut rng, params);
            run_trial(&g, &random_mask(&g, &mut rng), locator)
        })
        .collect();
    Ok(summarize(results?))
}
