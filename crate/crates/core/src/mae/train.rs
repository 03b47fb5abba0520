//! Minibatch training, gradient checking and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, AdamParams};
use super::{MaeError, MaeModel, MaskSampler, ModelConfig, ObservableLayout};
use crate::graph::Mask;
use crate::scalar::{lit, type_name, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub boundary_exclusion: bool,
    /// Fit a per-coordinate normalizer on the training data first.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            boundary_exclusion: false,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MaeError> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MaeError::Config(format!("invalid training configuration {self:?}")))
        }
    }

    fn adam(&self) -> AdamParams {
        AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Where each minibatch's mask comes from.
#[derive(Clone, Debug)]
pub enum MaskSource {
    Fixed(Mask),
    /// A fresh mask per minibatch.
    Resampled(MaskSampler),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: MaeModel<T>,
    /// Mean minibatch loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains `model` on the rows of `data` (observables in layout order).
pub fn train<T: Scalar>(
    data: &DMatrix<T>,
    masks: &MaskSource,
    mut model: MaeModel<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, MaeError> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(MaeError::Config("training data is empty".into()));
    }
    if data.ncols() != model.width() {
        return Err(MaeError::Width { what: "training data", expected: model.width(), got: data.ncols() });
    }
    if cfg.standardize {
        model.set_normalizer(Some(super::Normalizer::fit(data)))?;
    }
    let fixed_coords = match masks {
        MaskSource::Fixed(m) => Some(model.layout.loss_coords(m, cfg.boundary_exclusion)?),
        MaskSource::Resampled(_) => None,
    };
    let adam = cfg.adam();
    let mut opt_enc = Adam::new(&model.encoder);
    let mut opt_dec = Adam::new(&model.decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = data.select_rows(rows);
            let sampled;
            let (mask, coords) = match masks {
                MaskSource::Fixed(m) => (m, fixed_coords.clone().expect("fixed coordinates")),
                MaskSource::Resampled(s) => {
                    sampled = s.sample_mask(&mut rng);
                    let coords = model.layout.loss_coords(&sampled, cfg.boundary_exclusion)?;
                    (&sampled, coords)
                }
            };
            let noise = model.draw_noise(rows.len(), &mut rng);
            let (loss, grad) = model.loss_and_grad(&batch, mask, &noise, &coords)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(MaeError::Diverged { epoch, loss });
            }
            total += loss * rows.len() as f64;
            opt_enc.update(&mut model.encoder, &grad.encoder, &adam);
            opt_dec.update(&mut model.decoder, &grad.decoder, &adam);
        }
        losses.push(total / data.nrows() as f64);
    }
    Ok(TrainOutcome { model, losses })
}

/// Relative increase above which a loss step counts as a spike.
pub const SPIKE_TOLERANCE: f64 = 1e-2;

/// Epochs whose loss exceeds the previous epoch's by more than `rel_tol`.
pub fn count_loss_spikes(losses: &[f64], rel_tol: f64) -> usize {
    losses.windows(2).filter(|w| w[1] > w[0] * (1.0 + rel_tol)).count()
}

/// One spike per started block of 50 epochs.
pub fn spike_allowance(epochs: usize) -> usize {
    epochs.div_ceil(50).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_dev: f64,
    pub checked: usize,
    /// Frozen entries are reported with deviation 0 and not perturbed.
    pub frozen: usize,
}

pub fn grad_check<T: Scalar>(model: &MaeModel<T>, batch: &DMatrix<T>, mask: &Mask) -> Result<GradCheck, MaeError> {
    grad_check_with(model, batch, mask, |_| {})
}

/// Like [`grad_check`], with a hook that may alter the analytic gradient first.
pub fn grad_check_with<T: Scalar, F: FnOnce(&mut [T])>(
    model: &MaeModel<T>,
    batch: &DMatrix<T>,
    mask: &Mask,
    tamper: F,
) -> Result<GradCheck, MaeError> {
    const STEP: f64 = 1e-5;
    let coords = model.layout.loss_coords(mask, false)?;
    let noise = model.draw_noise(batch.nrows(), &mut ChaCha8Rng::seed_from_u64(0));
    let (_, grad) = model.loss_and_grad(batch, mask, &noise, &coords)?;
    let mut analytic = grad.flat();
    tamper(&mut analytic);

    let base = model.params();
    let frozen = model.frozen_flags();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut report = GradCheck { max_rel_dev: 0.0, checked: 0, frozen: 0 };
    for k in 0..base.len() {
        if frozen[k] {
            report.frozen += 1;
            continue;
        }
        params[k] = base[k] + lit(STEP);
        probe.set_params(&params)?;
        let up = probe.loss_with_noise(batch, mask, &noise, false)?.as_f64();
        params[k] = base[k] - lit(STEP);
        probe.set_params(&params)?;
        let down = probe.loss_with_noise(batch, mask, &noise, false)?.as_f64();
        params[k] = base[k];
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[k].as_f64();
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_dev = report.max_rel_dev.max(dev);
        report.checked += 1;
    }
    Ok(report)
}

const CHECKPOINT_TAG: &str = "latentlab-mae-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dtype: String,
    layout: ObservableLayout,
    d_c: usize,
    d_sm: usize,
    model: ModelConfig,
    encoder_sizes: Vec<usize>,
    decoder_sizes: Vec<usize>,
    encoder_frozen: Vec<bool>,
    decoder_frozen: Vec<bool>,
    param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalizer: Option<super::Normalizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MaeError + '_ {
    move |source| MaeError::Io { path: path.display().to_string(), source }
}

fn sizes<T: Scalar>(m: &super::Mlp<T>) -> Vec<usize> {
    [m.inputs()].into_iter().chain(m.layers.iter().map(|l| l.outputs())).collect()
}

/// Writes `model.json` (header) and `model.bin` (little-endian parameters) into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &MaeModel<T>,
    train: Option<&TrainConfig>,
) -> Result<(), MaeError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = CheckpointHeader {
        format: CHECKPOINT_TAG.into(),
        dtype: type_name::<T>().into(),
        layout: model.layout.clone(),
        d_c: model.d_c,
        d_sm: model.d_sm,
        model: model.config.clone(),
        encoder_sizes: sizes(&model.encoder),
        decoder_sizes: sizes(&model.decoder),
        encoder_frozen: model.encoder.layers.iter().map(|l| l.frozen).collect(),
        decoder_frozen: model.decoder.layers.iter().map(|l| l.frozen).collect(),
        param_count: model.param_count(),
        normalizer: model.normalizer.clone(),
        train: train.cloned(),
    };
    let json = dir.join("model.json");
    let text = serde_json::to_string_pretty(&header).map_err(|e| MaeError::Format(e.to_string()))?;
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    let mut bytes = Vec::with_capacity(model.param_count() * T::BYTES);
    for v in model.params() {
        v.write_le(&mut bytes);
    }
    let bin = dir.join("model.bin");
    fs::write(&bin, bytes).map_err(io_err(&bin))
}

pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(MaeModel<T>, Option<TrainConfig>), MaeError> {
    let dir = dir.as_ref();
    let json = dir.join("model.json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let h: CheckpointHeader = serde_json::from_str(&text).map_err(|e| MaeError::Format(e.to_string()))?;
    if h.format != CHECKPOINT_TAG {
        return Err(MaeError::Format(format!("unknown checkpoint format `{}`", h.format)));
    }
    if h.dtype != type_name::<T>() {
        return Err(MaeError::Format(format!("checkpoint holds {}, expected {}", h.dtype, type_name::<T>())));
    }
    let mut model = MaeModel::<T>::new(h.layout, h.d_c, h.d_sm, &h.model)?;
    if sizes(&model.encoder) != h.encoder_sizes || sizes(&model.decoder) != h.decoder_sizes {
        return Err(MaeError::Format("network shapes disagree with the header".into()));
    }
    if h.encoder_frozen.len() != model.encoder.layers.len() || h.decoder_frozen.len() != model.decoder.layers.len() {
        return Err(MaeError::Format("frozen flags disagree with the layer count".into()));
    }
    let bin = dir.join("model.bin");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != h.param_count * T::BYTES || h.param_count != model.param_count() {
        return Err(MaeError::Format(format!("{} has {} bytes for {} parameters", bin.display(), bytes.len(), h.param_count)));
    }
    let params: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    model.set_params(&params)?;
    model.set_normalizer(h.normalizer)?;
    for (l, f) in model.encoder.layers.iter_mut().zip(h.encoder_frozen) {
        l.frozen = f;
    }
    for (l, f) in model.decoder.layers.iter_mut().zip(h.decoder_frozen) {
        l.frozen = f;
    }
    Ok((model, h.train))
}

/// `epoch,loss` with 1-based epochs.
pub fn write_loss_csv(mut out: impl Write, losses: &[f64]) -> std::io::Result<()> {
    writeln!(out, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, l)?;
    }
    Ok(())
}

pub fn read_loss_csv(text: &str) -> Result<Vec<f64>, MaeError> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss") {
        return Err(MaeError::Format("loss curve must start with `epoch,loss`".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| MaeError::Format(format!("bad loss row `{l}`")))
        })
        .collect()
}
