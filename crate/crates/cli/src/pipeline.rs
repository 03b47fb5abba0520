//! The simulate, train and evaluate stages. Each stage reads its inputs from
//! the output directory of the previous one.

use std::fs;
use std::path::PathBuf;

use latentlab::graph::{LatentGraph, Mask, NodeSet};
use latentlab::ident::{block_identifiability, IdentReport};
use latentlab::locate::{locate, SharedInfo};
use latentlab::mae::{
    count_loss_spikes, load_checkpoint, reconstruction_metrics, save_checkpoint, spike_allowance, train,
    write_loss_csv, MaeModel, MaskSampler, MaskSource, ObservableLayout, ReconstructionMetrics, SPIKE_TOLERANCE,
};
use latentlab::scm::{build_scm, extract_blocks, Dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, MaeSettings, MaskMode};
use crate::error::{CliError, Result};

pub const SUMMARY_HEADER: &str =
    "graph,mask,n,d_c,d_sm,r2_c_from_chat,r2_chat_from_c,r2_sm_from_chat,asymmetry,n_train,n_test,mse,psnr";

#[derive(Clone, Debug, Serialize)]
pub struct SimulateReport {
    pub dataset: PathBuf,
    pub rows: usize,
    pub cols: usize,
    /// Hex digest of the binary dataset file.
    pub sha256: String,
}

pub fn simulate_in_memory(g: &LatentGraph, cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let scm = build_scm::<f64>(g, &cfg.scm)?;
    Ok(scm.sample(cfg.n, cfg.sample_seed))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulateReport> {
    let g = cfg.load_graph()?;
    let ds = simulate_in_memory(&g, cfg)?;
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let path = cfg.dataset_path();
    ds.write_binary(&path)?;
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(SimulateReport { dataset: path, rows: ds.n(), cols: ds.width(), sha256 })
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(CliError::Data(format!("dataset not found at {}; run simulate first", path.display())));
    }
    Ok(Dataset::read_binary(&path)?)
}

fn width_of(ds: &Dataset<f64>, set: &NodeSet) -> Result<usize> {
    set.iter().map(|id| Ok(ds.span(id.as_str())?.1)).sum()
}

fn layout_of(g: &LatentGraph, ds: &Dataset<f64>) -> Result<ObservableLayout> {
    let widths = g.layout().iter().map(|id| Ok(ds.span(id.as_str())?.1)).collect::<Result<Vec<_>>>()?;
    Ok(ObservableLayout::new(g.layout().to_vec(), widths)?)
}

pub struct Trained {
    pub model: MaeModel<f64>,
    pub losses: Vec<f64>,
    pub info: SharedInfo,
}

/// Trains on the observables of `ds`. Widths not fixed by `settings` follow
/// the located blocks of `mask`.
pub fn train_on(
    g: &LatentGraph,
    ds: &Dataset<f64>,
    mask: &Mask,
    sampler: Option<MaskSampler>,
    settings: &MaeSettings,
) -> Result<Trained> {
    let info = locate(g, mask)?;
    let d_c = match settings.d_c {
        Some(d) => d,
        None => width_of(ds, &info.c)?,
    };
    if d_c == 0 {
        return Err(CliError::Data("c is empty for this mask, so there is nothing to encode".into()));
    }
    let d_sm = match settings.d_sm {
        Some(d) => d,
        None => width_of(ds, &info.s_m)?,
    };
    let model = MaeModel::new(layout_of(g, ds)?, d_c, d_sm, &settings.model)?;
    let source = match sampler {
        Some(s) => MaskSource::Resampled(s),
        None => MaskSource::Fixed(mask.clone()),
    };
    let out = train(&ds.observables(g)?, &source, model, &settings.train)?;
    Ok(Trained { model: out.model, losses: out.losses, info })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub mask: NodeSet,
    pub d_c: usize,
    pub d_sm: usize,
    pub param_count: usize,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Epochs whose loss rose by more than the spike tolerance.
    pub loss_spikes: usize,
    pub spike_allowance: usize,
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
}

pub fn train_stage(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let g = cfg.load_graph()?;
    let ds = load_dataset(cfg)?;
    let mask = cfg.mask.resolve(&g)?;
    let sampler = match cfg.mae.mask_mode {
        MaskMode::Fixed => None,
        MaskMode::Resampled => Some(cfg.mask.sampler(&g)?),
    };
    let t = train_on(&g, &ds, &mask, sampler, &cfg.mae)?;
    save_checkpoint(cfg.checkpoint_dir(), &t.model, Some(&cfg.mae.train))?;
    let losses_path = cfg.losses_path();
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &t.losses).map_err(CliError::io(&losses_path))?;
    fs::write(&losses_path, csv).map_err(CliError::io(&losses_path))?;
    Ok(TrainReport {
        mask: mask.masked().clone(),
        d_c: t.model.d_c,
        d_sm: t.model.d_sm,
        param_count: t.model.param_count(),
        epochs: t.losses.len(),
        first_loss: t.losses[0],
        final_loss: *t.losses.last().expect("at least one epoch"),
        loss_spikes: count_loss_spikes(&t.losses, SPIKE_TOLERANCE),
        spike_allowance: spike_allowance(t.losses.len()),
        checkpoint: cfg.checkpoint_dir(),
        losses: losses_path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mask: NodeSet,
    pub c: NodeSet,
    pub s_m: NodeSet,
    pub s_mc: NodeSet,
    pub d_c: usize,
    pub d_sm: usize,
    pub ident: IdentReport,
    /// Masked coordinates only, with the largest absolute target as peak.
    pub reconstruction: ReconstructionMetrics,
}

/// Encodes the observables of `ds` and scores `c_hat` against the true blocks.
pub fn score(
    g: &LatentGraph,
    ds: &Dataset<f64>,
    mask: &Mask,
    model: &MaeModel<f64>,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let info = locate(g, mask)?;
    let x = ds.observables(g)?;
    let chat = model.encode_batch(&x, mask)?;
    let blocks = extract_blocks(ds, g, mask, &info)?;
    let ident = block_identifiability(&chat, &blocks.c, &blocks.s_m, &cfg.ident)?;

    let noise = model.draw_noise(x.nrows(), &mut ChaCha8Rng::seed_from_u64(cfg.mae.train.seed));
    let coords = model.layout.masked_coords(mask);
    let recon = model.reconstruct(&x, &noise, mask)?.select_columns(&coords);
    let target = x.select_columns(&coords);
    let peak = target.amax();
    let reconstruction = reconstruction_metrics(&recon, &target, if peak > 0.0 { peak } else { 1.0 })?;
    Ok(EvalReport {
        mask: mask.masked().clone(),
        c: info.c,
        s_m: info.s_m,
        s_mc: info.s_mc,
        d_c: model.d_c,
        d_sm: model.d_sm,
        ident,
        reconstruction,
    })
}

fn summary_row(cfg: &ExperimentConfig, r: &EvalReport) -> (String, String) {
    let graph = cfg.graph.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let mask: Vec<&str> = r.mask.iter().map(|id| id.as_str()).collect();
    let key = format!("{graph},{}", mask.join(";"));
    let i = &r.ident;
    let row = format!(
        "{key},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6e},{:.4}",
        cfg.n,
        r.d_c,
        r.d_sm,
        i.r2_c_from_chat,
        i.r2_chat_from_c,
        i.r2_sm_from_chat,
        i.asymmetry,
        i.n_train,
        i.n_test,
        r.reconstruction.mse,
        r.reconstruction.psnr
    );
    (key, row)
}

/// Replaces the row for the same graph and mask, or appends one.
fn update_summary(cfg: &ExperimentConfig, r: &EvalReport) -> Result<()> {
    let path = cfg.summary_path();
    let (key, row) = summary_row(cfg, r);
    let old = if path.exists() { fs::read_to_string(&path).map_err(CliError::io(&path))? } else { String::new() };
    let mut lines: Vec<String> = old
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with(&format!("{key},")))
        .map(str::to_owned)
        .collect();
    lines.push(row);
    let text = std::iter::once(SUMMARY_HEADER.to_owned()).chain(lines).collect::<Vec<_>>().join("\n") + "\n";
    fs::write(&path, text).map_err(CliError::io(&path))
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let dir = cfg.checkpoint_dir();
    if !dir.join("model.json").exists() {
        return Err(CliError::Data(format!("checkpoint not found in {}", dir.display())));
    }
    let g = cfg.load_graph()?;
    let ds = load_dataset(cfg)?;
    let (model, _) = load_checkpoint::<f64>(&dir)?;
    let mask = cfg.mask.resolve(&g)?;
    let report = score(&g, &ds, &mask, &model, cfg)?;
    let path = cfg.report_path();
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
    update_summary(cfg, &report)?;
    Ok(report)
}
