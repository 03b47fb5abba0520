//! A toy masked autoencoder.
//!
//! The encoder sees the observable vector with masked coordinates zeroed and a
//! per-coordinate mask indicator appended, and outputs `c_hat` of width `d_c`.
//! The decoder maps `(c_hat, s_hat, indicator)` back to the full observable
//! width, where `s_hat` is standard normal noise of width `d_sm`. Training
//! minimizes the squared error on masked coordinates.

mod mlp;
mod sampler;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{GraphError, Mask};
use crate::scalar::{lit, Scalar};

pub use mlp::{Adam, AdamParams, Dense, Mlp, MlpGrad};
pub use sampler::{Geometry, MaskSampler, ObservableLayout};
pub use train::{
    count_loss_spikes, grad_check, grad_check_with, load_checkpoint, read_loss_csv, save_checkpoint, spike_allowance,
    train, write_loss_csv, GradCheck, MaskSource, TrainConfig, TrainOutcome, SPIKE_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum MaeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} has width {got}, expected {expected}")]
    Width { what: &'static str, expected: usize, got: usize },
    #[error("{observables} observables with patch size {patch} leave fewer than two patches")]
    LayoutTooSmall { observables: usize, patch: usize },
    #[error("no masked coordinate remains after boundary exclusion")]
    EmptyLoss,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

fn width_check(what: &'static str, expected: usize, got: usize) -> Result<(), MaeError> {
    if expected == got {
        Ok(())
    } else {
        Err(MaeError::Width { what, expected, got })
    }
}

/// Network shape and initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Negative-side slope of the hidden activations.
    pub slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64], slope: 0.2, seed: 0 }
    }
}

/// Per-coordinate affine map applied to observables before the networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    /// Column means and standard deviations; constant columns keep scale 1.
    pub fn fit<T: Scalar>(data: &DMatrix<T>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mut shift = Vec::with_capacity(data.ncols());
        let mut scale = Vec::with_capacity(data.ncols());
        for col in data.column_iter() {
            let mu = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / n).sqrt();
            shift.push(mu);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Normalizer { shift, scale }
    }

    pub fn apply<T: Scalar>(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (lit::<T>(self.shift[j]), lit::<T>(self.scale[j]));
            col.apply(|v| *v = (*v - mu) / sd);
        }
        out
    }

    pub fn undo<T: Scalar>(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let mut out = y.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (mu, sd) = (lit::<T>(self.shift[j]), lit::<T>(self.scale[j]));
            col.apply(|v| *v = *v * sd + mu);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel<T: Scalar> {
    pub layout: ObservableLayout,
    pub d_c: usize,
    pub d_sm: usize,
    pub config: ModelConfig,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    /// When set, the networks work on normalized observables and the loss is
    /// measured in normalized units.
    pub normalizer: Option<Normalizer>,
}

/// Gradients of both networks.
#[derive(Clone, Debug)]
pub struct MaeGrad<T: Scalar> {
    pub encoder: MlpGrad<T>,
    pub decoder: MlpGrad<T>,
}

impl<T: Scalar> MaeModel<T> {
    pub fn new(layout: ObservableLayout, d_c: usize, d_sm: usize, config: &ModelConfig) -> Result<Self, MaeError> {
        if d_c == 0 {
            return Err(MaeError::Config("d_c must be at least 1".into()));
        }
        if config.hidden.contains(&0) || !(config.slope > 0.0 && config.slope <= 1.0) {
            return Err(MaeError::Config("hidden widths must be positive and the slope in (0, 1]".into()));
        }
        let w = layout.width();
        let slope = lit::<T>(config.slope);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_sizes: Vec<usize> = [2 * w].into_iter().chain(config.hidden.iter().copied()).chain([d_c]).collect();
        let encoder = Mlp::new(&enc_sizes, slope, &mut rng);
        rng.set_stream(1);
        let dec_sizes: Vec<usize> = [d_c + d_sm + w].into_iter().chain(config.hidden.iter().copied()).chain([w]).collect();
        let decoder = Mlp::new(&dec_sizes, slope, &mut rng);
        Ok(MaeModel { layout, d_c, d_sm, config: config.clone(), encoder, decoder, normalizer: None })
    }

    /// Observable width.
    pub fn width(&self) -> usize {
        self.layout.width()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Sets the normalizer; its length must match the observable width.
    pub fn set_normalizer(&mut self, normalizer: Option<Normalizer>) -> Result<(), MaeError> {
        if let Some(n) = &normalizer {
            width_check("normalizer", self.width(), n.shift.len())?;
            width_check("normalizer", self.width(), n.scale.len())?;
        }
        self.normalizer = normalizer;
        Ok(())
    }

    /// Observables in the units the networks see.
    pub fn normalize(&self, x: &DMatrix<T>) -> DMatrix<T> {
        match &self.normalizer {
            Some(n) => n.apply(x),
            None => x.clone(),
        }
    }

    fn denormalize(&self, y: DMatrix<T>) -> DMatrix<T> {
        match &self.normalizer {
            Some(n) => n.undo(&y),
            None => y,
        }
    }

    /// Zero-filled observables followed by the mask indicator, one row per sample.
    pub fn encoder_input(&self, x: &DMatrix<T>, mask: &Mask) -> Result<DMatrix<T>, MaeError> {
        let w = self.width();
        width_check("observable batch", w, x.ncols())?;
        let mut input = DMatrix::zeros(x.nrows(), 2 * w);
        input.columns_mut(0, w).copy_from(&self.normalize(x));
        for k in self.layout.masked_coords(mask) {
            input.column_mut(k).fill(T::zero());
            input.column_mut(w + k).fill(T::one());
        }
        Ok(input)
    }

    pub fn decoder_input(&self, chat: &DMatrix<T>, noise: &DMatrix<T>, mask: &Mask) -> Result<DMatrix<T>, MaeError> {
        width_check("c_hat", self.d_c, chat.ncols())?;
        width_check("s_hat", self.d_sm, noise.ncols())?;
        if chat.nrows() != noise.nrows() {
            return Err(MaeError::Width { what: "s_hat rows", expected: chat.nrows(), got: noise.nrows() });
        }
        let (w, b) = (self.width(), chat.nrows());
        let mut input = DMatrix::zeros(b, self.d_c + self.d_sm + w);
        input.columns_mut(0, self.d_c).copy_from(chat);
        input.columns_mut(self.d_c, self.d_sm).copy_from(noise);
        for k in self.layout.masked_coords(mask) {
            input.column_mut(self.d_c + self.d_sm + k).fill(T::one());
        }
        Ok(input)
    }

    /// `c_hat` for full-width observable rows; masked coordinates are ignored.
    pub fn encode_batch(&self, x: &DMatrix<T>, mask: &Mask) -> Result<DMatrix<T>, MaeError> {
        Ok(self.encoder.forward(&self.encoder_input(x, mask)?))
    }

    /// `c_hat` for one sample given only its visible coordinates in layout order.
    pub fn encode(&self, x_visible: &DVector<T>, mask: &Mask) -> Result<DVector<T>, MaeError> {
        let visible = self.layout.visible_coords(mask);
        width_check("visible input", visible.len(), x_visible.len())?;
        let mut full = DMatrix::zeros(1, self.width());
        for (&k, &v) in visible.iter().zip(x_visible.iter()) {
            full[(0, k)] = v;
        }
        Ok(self.encode_batch(&full, mask)?.row(0).transpose())
    }

    /// Decoder output in observable units.
    pub fn decode_batch(&self, chat: &DMatrix<T>, noise: &DMatrix<T>, mask: &Mask) -> Result<DMatrix<T>, MaeError> {
        Ok(self.denormalize(self.decoder.forward(&self.decoder_input(chat, noise, mask)?)))
    }

    /// Full-width decoder output for one sample.
    pub fn decode(&self, chat: &DVector<T>, s_hat: &DVector<T>, mask: &Mask) -> Result<DVector<T>, MaeError> {
        let row = |v: &DVector<T>| DMatrix::from_row_slice(1, v.len(), v.as_slice());
        let out = self.decode_batch(&row(chat), &row(s_hat), mask)?;
        Ok(out.row(0).transpose())
    }

    pub fn reconstruct(&self, x: &DMatrix<T>, noise: &DMatrix<T>, mask: &Mask) -> Result<DMatrix<T>, MaeError> {
        let chat = self.encode_batch(x, mask)?;
        self.decode_batch(&chat, noise, mask)
    }

    /// Standard normal `s_hat`, one row per sample.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DMatrix<T> {
        DMatrix::from_fn(rows, self.d_sm, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            lit(z)
        })
    }

    /// Masked-coordinate mean squared error with freshly drawn `s_hat`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        batch: &DMatrix<T>,
        mask: &Mask,
        rng: &mut R,
        boundary_exclusion: bool,
    ) -> Result<T, MaeError> {
        let noise = self.draw_noise(batch.nrows(), rng);
        self.loss_with_noise(batch, mask, &noise, boundary_exclusion)
    }

    pub fn loss_with_noise(
        &self,
        batch: &DMatrix<T>,
        mask: &Mask,
        noise: &DMatrix<T>,
        boundary_exclusion: bool,
    ) -> Result<T, MaeError> {
        let coords = self.layout.loss_coords(mask, boundary_exclusion)?;
        let chat = self.encode_batch(batch, mask)?;
        let out = self.decoder.forward(&self.decoder_input(&chat, noise, mask)?);
        Ok(masked_mse(&out, &self.normalize(batch), &coords))
    }

    /// Loss and gradients by reverse-mode differentiation through both networks.
    pub fn loss_and_grad(
        &self,
        batch: &DMatrix<T>,
        mask: &Mask,
        noise: &DMatrix<T>,
        coords: &[usize],
    ) -> Result<(T, MaeGrad<T>), MaeError> {
        let enc_cache = self.encoder.forward_cached(&self.encoder_input(batch, mask)?);
        let chat = enc_cache.output();
        let dec_cache = self.decoder.forward_cached(&self.decoder_input(chat, noise, mask)?);
        let out = dec_cache.output();
        let batch = self.normalize(batch);
        let loss = masked_mse(out, &batch, coords);

        let scale = lit::<T>(2.0) / T::from_usize(batch.nrows() * coords.len()).expect("count fits");
        let mut g_out = DMatrix::zeros(out.nrows(), out.ncols());
        for &k in coords {
            for r in 0..out.nrows() {
                g_out[(r, k)] = scale * (out[(r, k)] - batch[(r, k)]);
            }
        }
        let (decoder, g_in) = self.decoder.backward(&dec_cache, &g_out);
        let g_chat = g_in.columns(0, self.d_c).into_owned();
        let (encoder, _) = self.encoder.backward(&enc_cache, &g_chat);
        Ok((loss, MaeGrad { encoder, decoder }))
    }

    /// All parameters, encoder first.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.write_params(&mut out);
        self.decoder.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[T]) -> Result<(), MaeError> {
        width_check("parameter vector", self.param_count(), flat.len())?;
        let used = self.encoder.read_params(flat);
        self.decoder.read_params(&flat[used..]);
        Ok(())
    }

    /// Per-parameter frozen flags in [`MaeModel::params`] order.
    pub fn frozen_flags(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.write_frozen(&mut out);
        self.decoder.write_frozen(&mut out);
        out
    }
}

impl<T: Scalar> MaeGrad<T> {
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.encoder.write_flat(&mut out);
        self.decoder.write_flat(&mut out);
        out
    }
}

fn masked_mse<T: Scalar>(out: &DMatrix<T>, target: &DMatrix<T>, coords: &[usize]) -> T {
    let mut acc = 0.0f64;
    for &k in coords {
        for r in 0..out.nrows() {
            let d = (out[(r, k)] - target[(r, k)]).as_f64();
            acc += d * d;
        }
    }
    lit(acc / (out.nrows() * coords.len()).max(1) as f64)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReconstructionMetrics {
    pub mse: f64,
    /// `+inf` when the reconstruction is exact.
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
}

pub fn reconstruction_metrics<T: Scalar>(
    reconstruction: &DMatrix<T>,
    target: &DMatrix<T>,
    peak: f64,
) -> Result<ReconstructionMetrics, MaeError> {
    if reconstruction.shape() != target.shape() {
        return Err(MaeError::Width { what: "reconstruction", expected: target.ncols(), got: reconstruction.ncols() });
    }
    if !(peak > 0.0) {
        return Err(MaeError::Config(format!("peak {peak} must be positive")));
    }
    let n = target.len().max(1) as f64;
    let mse = reconstruction.iter().zip(target.iter()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>() / n;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };
    Ok(ReconstructionMetrics { mse, psnr })
}
