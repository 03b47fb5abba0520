//! Block-identifiability scores: how well a learned block and a true block
//! predict each other on held-out rows.
//!
//! Both directions are fitted with a nonlinear regressor. High held-out R²
//! in both directions indicates a one-to-one correspondence; a low score for
//! predicting an independent block from the learned one indicates no leakage.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mae::{Adam, AdamParams, Mlp};
use crate::scalar::Scalar;

/// Fewest rows accepted by [`fit_regressor`].
pub const MIN_ROWS: usize = 50;

/// Gap between the two directions above which a report is flagged.
pub const ASYMMETRY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need at least {MIN_ROWS} rows, got {0}")]
    TooFewRows(usize),
    #[error("every input column has zero variance")]
    Degenerate,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Gaussian kernel plus a linear kernel, closed-form ridge solution.
    #[default]
    KernelRidge,
    /// Small feedforward network trained on squared error.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub family: Family,
    pub ridge: f64,
    /// Fraction of rows used for fitting; the rest is held out.
    pub split: f64,
    pub seed: u64,
    /// Training rows are subsampled to this many for the kernel solve.
    pub max_train_rows: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_epochs: usize,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            family: Family::KernelRidge,
            ridge: 1e-3,
            split: 0.8,
            seed: 0,
            max_train_rows: 2000,
            mlp_hidden: vec![64, 64],
            mlp_epochs: 200,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(IdentError::Config(format!("split {} outside (0, 1)", self.split)));
        }
        if !(self.ridge > 0.0) {
            return Err(IdentError::Config(format!("ridge {} must be positive", self.ridge)));
        }
        if self.max_train_rows < 2 || self.mlp_epochs == 0 || self.mlp_hidden.contains(&0) {
            return Err(IdentError::Config("row cap, epochs and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

fn to_f64<T: Scalar>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|v| v.as_f64())
}

/// Column means and standard deviations; constant columns get scale 1.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
    informative: usize,
}

impl Standardizer {
    fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows().max(1) as f64;
        let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
        let mut informative = 0;
        let scale = DVector::from_iterator(
            m.ncols(),
            m.column_iter().zip(mean.iter()).map(|(c, &mu)| {
                let sd = (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    informative += 1;
                    sd
                } else {
                    1.0
                }
            }),
        );
        Standardizer { mean, scale, informative }
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
            col /= self.scale[j];
        }
        out
    }

    fn undo(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= self.scale[j];
            col.add_scalar_mut(self.mean[j]);
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Model {
    Kernel { train_x: DMatrix<f64>, alpha: DMatrix<f64>, bandwidth: f64 },
    Net(Mlp<f64>),
}

/// A fitted regressor together with its held-out rows.
#[derive(Clone, Debug)]
pub struct Regressor {
    x_std: Standardizer,
    y_std: Standardizer,
    model: Model,
    pub test_x: DMatrix<f64>,
    pub test_y: DMatrix<f64>,
    pub n_train: usize,
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

/// Gaussian kernel on squared distances plus a linear kernel.
fn kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, bandwidth: f64) -> DMatrix<f64> {
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = a * b.transpose();
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[(i, j)] += (-g * sq_dist(a, i, b, j)).exp();
        }
    }
    k
}

/// Median pairwise distance over at most 500 rows.
fn median_distance(x: &DMatrix<f64>) -> f64 {
    let m = x.nrows().min(500);
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            d.push(sq_dist(x, i, x, j).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn fit_mlp(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &RegressorConfig) -> Mlp<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = [x.ncols()].into_iter().chain(cfg.mlp_hidden.iter().copied()).chain([y.ncols()]).collect();
    let mut net = Mlp::new(&sizes, 0.2, &mut rng);
    let mut opt = Adam::new(&net);
    let params = AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..cfg.mlp_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(128) {
            let xb = x.select_rows(rows);
            let yb = y.select_rows(rows);
            let cache = net.forward_cached(&xb);
            let scale = 2.0 / (yb.len() as f64);
            let g = (cache.output() - &yb) * scale;
            let (grad, _) = net.backward(&cache, &g);
            opt.update(&mut net, &grad, &params);
        }
    }
    net
}

/// Fits `Y ~ X` on a seeded train split and keeps the held-out rows.
pub fn fit_regressor<T: Scalar>(x: &DMatrix<T>, y: &DMatrix<T>, cfg: &RegressorConfig) -> Result<Regressor, IdentError> {
    cfg.validate()?;
    if x.nrows() != y.nrows() {
        return Err(IdentError::RowMismatch(x.nrows(), y.nrows()));
    }
    let n = x.nrows();
    if n < MIN_ROWS {
        return Err(IdentError::TooFewRows(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let cut = ((n as f64 * cfg.split).round() as usize).clamp(1, n - 1);
    let (train_rows, test_rows) = order.split_at(cut);
    let (x, y) = (to_f64(x), to_f64(y));
    let fit_rows = &train_rows[..train_rows.len().min(cfg.max_train_rows)];
    let x_train = x.select_rows(fit_rows);
    let y_train = y.select_rows(fit_rows);

    let x_std = Standardizer::fit(&x_train);
    if x_std.informative == 0 {
        return Err(IdentError::Degenerate);
    }
    let y_std = Standardizer::fit(&y_train);
    let xs = x_std.apply(&x_train);
    let ys = y_std.apply(&y_train);

    let model = match cfg.family {
        Family::KernelRidge => {
            let bandwidth = median_distance(&xs);
            let mut k = kernel(&xs, &xs, bandwidth);
            for i in 0..k.nrows() {
                k[(i, i)] += cfg.ridge;
            }
            let chol = Cholesky::new(k).ok_or_else(|| IdentError::Numerical("kernel matrix is not positive definite".into()))?;
            Model::Kernel { alpha: chol.solve(&ys), train_x: xs, bandwidth }
        }
        Family::Mlp => Model::Net(fit_mlp(&xs, &ys, cfg)),
    };
    Ok(Regressor {
        x_std,
        y_std,
        model,
        test_x: x.select_rows(test_rows),
        test_y: y.select_rows(test_rows),
        n_train: fit_rows.len(),
    })
}

impl Regressor {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xs = self.x_std.apply(x);
        let ys = match &self.model {
            Model::Kernel { train_x, alpha, bandwidth } => kernel(&xs, train_x, *bandwidth) * alpha,
            Model::Net(net) => net.forward(&xs),
        };
        self.y_std.undo(&ys)
    }

    pub fn n_test(&self) -> usize {
        self.test_x.nrows()
    }

    /// Held-out score on the rows kept back by [`fit_regressor`].
    pub fn held_out_r2(&self) -> R2 {
        r2(self, &self.test_x, &self.test_y)
    }
}

/// Mean R² over target dimensions with defined scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct R2 {
    /// `None` when no target dimension has variance.
    pub mean: Option<f64>,
    /// `None` for zero-variance target dimensions.
    pub per_dim: Vec<Option<f64>>,
}

/// `1 - SSE/SST` per target column, with SST around the test mean.
pub fn r2_score(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> R2 {
    let n = truth.nrows() as f64;
    let per_dim: Vec<Option<f64>> = truth
        .column_iter()
        .zip(pred.column_iter())
        .map(|(t, p)| {
            let mu = t.sum() / n;
            let sst: f64 = t.iter().map(|v| (v - mu).powi(2)).sum();
            let sse: f64 = t.iter().zip(p.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            (sst > 1e-12 * n.max(1.0)).then(|| 1.0 - sse / sst)
        })
        .collect();
    let defined: Vec<f64> = per_dim.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    R2 { mean, per_dim }
}

pub fn r2(reg: &Regressor, x_test: &DMatrix<f64>, y_test: &DMatrix<f64>) -> R2 {
    r2_score(&reg.predict(x_test), y_test)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionScores {
    pub c_from_chat: Vec<Option<f64>>,
    pub chat_from_c: Vec<Option<f64>>,
    pub sm_from_chat: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentReport {
    pub r2_c_from_chat: f64,
    pub r2_chat_from_c: f64,
    /// 0 when `s_m` is empty.
    pub r2_sm_from_chat: f64,
    /// `r2_chat_from_c - r2_c_from_chat`
    pub asymmetry: f64,
    pub asymmetric: bool,
    pub per_dim: DirectionScores,
    pub n_train: usize,
    pub n_test: usize,
    pub config: RegressorConfig,
}

fn direction<T: Scalar>(x: &DMatrix<T>, y: &DMatrix<T>, cfg: &RegressorConfig) -> Result<(R2, Regressor), IdentError> {
    let reg = fit_regressor(x, y, cfg)?;
    Ok((reg.held_out_r2(), reg))
}

/// Scores `c <- c_hat`, `c_hat <- c` and the leakage probe `s_m <- c_hat`.
pub fn block_identifiability<T: Scalar>(
    chat: &DMatrix<T>,
    c: &DMatrix<T>,
    s_m: &DMatrix<T>,
    cfg: &RegressorConfig,
) -> Result<IdentReport, IdentError> {
    let n = chat.nrows();
    for m in [c, s_m] {
        if m.nrows() != n {
            return Err(IdentError::RowMismatch(n, m.nrows()));
        }
    }
    let (fwd, reg) = direction(chat, c, cfg)?;
    let (back, _) = direction(c, chat, cfg)?;
    let leak = if s_m.ncols() == 0 { None } else { Some(direction(chat, s_m, cfg)?.0) };
    let score = |r: &R2| r.mean.unwrap_or(0.0);
    let r2_c_from_chat = score(&fwd);
    let r2_chat_from_c = score(&back);
    let asymmetry = r2_chat_from_c - r2_c_from_chat;
    Ok(IdentReport {
        r2_c_from_chat,
        r2_chat_from_c,
        r2_sm_from_chat: leak.as_ref().map_or(0.0, score),
        asymmetry,
        asymmetric: asymmetry.abs() > ASYMMETRY_THRESHOLD,
        per_dim: DirectionScores {
            c_from_chat: fwd.per_dim,
            chat_from_c: back.per_dim,
            sm_from_chat: leak.map(|r| r.per_dim).unwrap_or_default(),
        },
        n_train: reg.n_train,
        n_test: reg.n_test(),
        config: cfg.clone(),
    })
}
