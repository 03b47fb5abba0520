//! Feedforward network with leaky activations and explicit reverse-mode
//! gradients. Rows of every batch matrix are samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `out x in`
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    /// Frozen layers receive zero gradient and are skipped by the optimizer.
    pub frozen: bool,
}

impl<T: Scalar> Dense<T> {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Leaky activation after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Dense<T>>,
    pub slope: T,
}

/// Gradient with the same shape as an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad<T: Scalar> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

pub struct Cache<T: Scalar> {
    /// input of layer i, then the network output
    acts: Vec<DMatrix<T>>,
    pres: Vec<DMatrix<T>>,
}

impl<T: Scalar> Cache<T> {
    pub fn output(&self) -> &DMatrix<T> {
        self.acts.last().expect("non-empty cache")
    }
}

fn add_bias<T: Scalar>(m: &mut DMatrix<T>, b: &DVector<T>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

impl<T: Scalar> Mlp<T> {
    /// Scaled Gaussian initialization, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], slope: T, rng: &mut R) -> Self {
        let gain = (2.0 / (1.0 + slope.as_f64().powi(2))).sqrt();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    lit::<T>(std * z)
                });
                Dense { weight, bias: DVector::zeros(fan_out), frozen: false }
            })
            .collect();
        Mlp { layers, slope }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn act(&self, t: T) -> T {
        if t >= T::zero() {
            t
        } else {
            self.slope * t
        }
    }

    fn act_grad(&self, t: T) -> T {
        if t >= T::zero() {
            T::one()
        } else {
            self.slope
        }
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = &h * l.weight.transpose();
            add_bias(&mut h, &l.bias);
            if i < last {
                h.apply(|t| *t = self.act(*t));
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> Cache<T> {
        let last = self.layers.len().saturating_sub(1);
        let mut acts = vec![x.clone()];
        let mut pres = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut pre = acts[i].clone() * l.weight.transpose();
            add_bias(&mut pre, &l.bias);
            let out = if i < last { pre.map(|t| self.act(t)) } else { pre.clone() };
            pres.push(pre);
            acts.push(out);
        }
        Cache { acts, pres }
    }

    /// Parameter gradient and input gradient for an upstream gradient on the output.
    pub fn backward(&self, cache: &Cache<T>, grad_out: &DMatrix<T>) -> (MlpGrad<T>, DMatrix<T>) {
        let n = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut biases = vec![DVector::zeros(0); n];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            if i + 1 < n {
                g.zip_apply(&cache.pres[i], |gv, p| *gv *= self.act_grad(p));
            }
            if l.frozen {
                weights[i] = DMatrix::zeros(l.outputs(), l.inputs());
                biases[i] = DVector::zeros(l.outputs());
            } else {
                weights[i] = g.tr_mul(&cache.acts[i]);
                biases[i] = DVector::from_iterator(g.ncols(), g.column_iter().map(|c| c.sum()));
            }
            g = &g * &l.weight;
        }
        (MlpGrad { weights, biases }, g)
    }

    /// Parameters flattened layer by layer, weights column-major then bias.
    pub fn write_params(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
    }

    /// Inverse of [`Mlp::write_params`]; returns the number of values read.
    pub fn read_params(&mut self, src: &[T]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&src[at..at + w]);
            at += w;
            let b = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&src[at..at + b]);
            at += b;
        }
        at
    }

    /// Flags per parameter, in [`Mlp::write_params`] order.
    pub fn write_frozen(&self, out: &mut Vec<bool>) {
        for l in &self.layers {
            out.extend(std::iter::repeat_n(l.frozen, l.param_count()));
        }
    }
}

impl<T: Scalar> MlpGrad<T> {
    pub fn write_flat(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(mlp: &Mlp<T>) -> Self {
        let n = mlp.param_count();
        Adam { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    pub fn update(&mut self, mlp: &mut Mlp<T>, grad: &MlpGrad<T>, p: &AdamParams) {
        self.step += 1;
        let (b1, b2) = (lit::<T>(p.beta1), lit::<T>(p.beta2));
        let c1 = lit::<T>(1.0 - p.beta1.powi(self.step));
        let c2 = lit::<T>(1.0 - p.beta2.powi(self.step));
        let (lr, eps) = (lit::<T>(p.lr), lit::<T>(p.eps));
        let one = T::one();
        let mut at = 0;
        for (l, (gw, gb)) in mlp.layers.iter_mut().zip(grad.weights.iter().zip(&grad.biases)) {
            let count = l.param_count();
            if l.frozen {
                at += count;
                continue;
            }
            let params = l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice().iter_mut());
            let grads = gw.iter().chain(gb.iter());
            for (k, (w, &g)) in params.zip(grads).enumerate() {
                let (m, v) = (&mut self.m[at + k], &mut self.v[at + k]);
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            at += count;
        }
    }
}
