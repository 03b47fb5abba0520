//! Level of the shared information across masking ratios and patch sizes.

use std::fmt::Write as _;

use latentlab::graph::{DimMap, LatentGraph, Mask, NodeId};
use latentlab::locate::{level_stats, locate_c};
use latentlab::mae::MaskSampler;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::pipeline::{self, Trained};
use crate::ExperimentConfig;

pub const CSV_HEADER: &str =
    "ratio,patch,k_masks,median_max_level,mean_max_level,max_max_level,mean_level,mean_total_dim_c";
const TRAINING_COLUMNS: &str = ",r2_c_from_chat,r2_chat_from_c,r2_sm_from_chat";

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub patches: Vec<usize>,
    /// Masks drawn per cell; ignored when `contiguous` is set.
    pub k_masks: usize,
    pub seed: u64,
    /// Enumerate every run of consecutive patches instead of sampling.
    pub contiguous: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CellScores {
    pub r2_c_from_chat: f64,
    pub r2_chat_from_c: f64,
    pub r2_sm_from_chat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub patch: usize,
    pub k_masks: usize,
    pub median_max_level: f64,
    pub mean_max_level: f64,
    pub max_max_level: usize,
    pub mean_level: f64,
    pub mean_total_dim_c: f64,
    /// Only filled by [`sweep_with_training`]; `None` when `c` is empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<CellScores>,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Every mask made of `k` consecutive patches.
fn contiguous_masks(g: &LatentGraph, sampler: &MaskSampler) -> Result<Vec<Mask>> {
    let patches: Vec<&[NodeId]> = sampler.patches().collect();
    patches
        .windows(sampler.masked_patches())
        .map(|w| Ok(Mask::new(g, w.iter().flat_map(|p| p.iter().cloned()).collect())?))
        .collect()
}

fn cell_masks(g: &LatentGraph, ratio: f64, patch: usize, cfg: &SweepConfig, cell: usize) -> Result<Vec<Mask>> {
    let sampler = MaskSampler::for_graph(g, ratio, patch)?;
    if cfg.contiguous {
        return contiguous_masks(g, &sampler);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cell as u64);
    Ok((0..cfg.k_masks).map(|_| sampler.sample_mask(&mut rng)).collect())
}

fn cell_row(g: &LatentGraph, dims: &DimMap, ratio: f64, patch: usize, masks: &[Mask]) -> Result<Option<SweepRow>> {
    if masks.is_empty() {
        return Ok(None);
    }
    let mut max_levels = Vec::with_capacity(masks.len());
    let (mut level_sum, mut dim_sum) = (0.0, 0.0);
    for m in masks {
        let (c, _) = locate_c(g, m)?;
        let s = level_stats(g, &c, dims)?;
        max_levels.push(s.max_level);
        level_sum += s.mean_level;
        dim_sum += s.total_dim as f64;
    }
    let k = masks.len() as f64;
    let mean_max = max_levels.iter().sum::<usize>() as f64 / k;
    max_levels.sort_unstable();
    Ok(Some(SweepRow {
        ratio,
        patch,
        k_masks: masks.len(),
        median_max_level: median(&max_levels),
        mean_max_level: mean_max,
        max_max_level: *max_levels.last().expect("non-empty"),
        mean_level: level_sum / k,
        mean_total_dim_c: dim_sum / k,
        scores: None,
    }))
}

fn cells(cfg: &SweepConfig) -> Vec<(f64, usize)> {
    cfg.ratios.iter().flat_map(|&r| cfg.patches.iter().map(move |&s| (r, s))).collect()
}

/// One row per `(ratio, patch)` cell, in input order. Cells run in parallel;
/// cell `i` samples from stream `i` of the generator seeded with `seed`.
pub fn sweep(g: &LatentGraph, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    g.ensure_valid()?;
    let dims = g.additive_dims(&DimMap::new())?;
    let rows: Result<Vec<Option<SweepRow>>> = cells(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, (r, s))| cell_row(g, &dims, r, s, &cell_masks(g, r, s, cfg, i)?))
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

/// [`sweep`] plus a trained model per cell, fitted to the first mask of the
/// cell on one shared dataset simulated from `exp`.
pub fn sweep_with_training(g: &LatentGraph, cfg: &SweepConfig, exp: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let dims = g.additive_dims(&DimMap::new())?;
    let ds = pipeline::simulate_in_memory(g, exp)?;
    let rows: Result<Vec<Option<SweepRow>>> = cells(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, (r, s))| {
            let masks = cell_masks(g, r, s, cfg, i)?;
            let Some(mut row) = cell_row(g, &dims, r, s, &masks)? else { return Ok(None) };
            let (c, _) = locate_c(g, &masks[0])?;
            if !c.is_empty() {
                let Trained { model, .. } = pipeline::train_on(g, &ds, &masks[0], None, &exp.mae)?;
                let report = pipeline::score(g, &ds, &masks[0], &model, exp)?;
                row.scores = Some(CellScores {
                    r2_c_from_chat: report.ident.r2_c_from_chat,
                    r2_chat_from_c: report.ident.r2_chat_from_c,
                    r2_sm_from_chat: report.ident.r2_sm_from_chat,
                });
            }
            Ok(Some(row))
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

/// Rows as CSV with [`CSV_HEADER`]; score columns are added when any row has them.
pub fn to_csv(rows: &[SweepRow]) -> String {
    let training = rows.iter().any(|r| r.scores.is_some());
    let mut out = String::from(CSV_HEADER);
    if training {
        out.push_str(TRAINING_COLUMNS);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.ratio, r.patch, r.k_masks, r.median_max_level, r.mean_max_level, r.max_max_level, r.mean_level, r.mean_total_dim_c
        );
        if training {
            match r.scores {
                Some(s) => {
                    let _ = write!(out, ",{:.6},{:.6},{:.6}", s.r2_c_from_chat, s.r2_chat_from_c, s.r2_sm_from_chat);
                }
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    out
}
