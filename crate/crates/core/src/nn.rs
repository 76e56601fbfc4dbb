//! Single affine layers with a fixed activation, their exact gradients, SGD
//! with polynomial learning-rate decay, and the EMA teacher.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const LEAKY_SLOPE: f64 = 0.01;
/// Lower clamp applied before simplex normalization.
pub const SIMPLEX_FLOOR: f64 = 1e-12;
/// Exponent of the polynomial learning-rate decay.
pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    SoftmaxRows,
    Identity,
    /// `max(z, floor) / Σ max(z, floor)` per row. Maps nonnegative inputs
    /// that already sum to one onto themselves.
    SimplexNormalize,
}

impl Activation {
    fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Identity => pre.clone(),
            Activation::LeakyRelu => pre.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            Activation::SoftmaxRows => {
                let mut out = pre.clone();
                for i in 0..out.rows() {
                    softmax_in_place(out.row_mut(i));
                }
                out
            }
            Activation::SimplexNormalize => {
                let mut out = pre.map(|v| v.max(SIMPLEX_FLOOR));
                for i in 0..out.rows() {
                    let r = out.row_mut(i);
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|v| *v /= s);
                }
                out
            }
        }
    }

    /// Gradient wrt the pre-activation given the gradient wrt the output.
    fn backward(self, pre: &Matrix, out: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::LeakyRelu => Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
                let slope = if pre[(i, j)] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                slope * upstream[(i, j)]
            }),
            Activation::SoftmaxRows => {
                let mut g = Matrix::zeros(pre.rows(), pre.cols());
                for i in 0..pre.rows() {
                    let (y, u) = (out.row(i), upstream.row(i));
                    let inner: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (j, d) in g.row_mut(i).iter_mut().enumerate() {
                        *d = y[j] * (u[j] - inner);
                    }
                }
                g
            }
            Activation::SimplexNormalize => {
                let mut g = Matrix::zeros(pre.rows(), pre.cols());
                for i in 0..pre.rows() {
                    let (z, y, u) = (pre.row(i), out.row(i), upstream.row(i));
                    let s: f64 = z.iter().map(|v| v.max(SIMPLEX_FLOOR)).sum();
                    let inner: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (j, d) in g.row_mut(i).iter_mut().enumerate() {
                        if z[j] > SIMPLEX_FLOOR {
                            *d = (u[j] - inner) / s;
                        }
                    }
                }
                g
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Affine map `x ↦ act(W x + b)` applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    version: u64,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    pre: Matrix,
    output: Matrix,
    version: u64,
    shape: (usize, usize),
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            weight: Matrix::zeros(p.out_dim(), p.in_dim()),
            bias: vec![0.0; p.out_dim()],
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        self.weight.axpy(1.0, &other.weight);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

impl MlpParams {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Dimension(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param("layer parameters must be finite".into()));
        }
        Ok(MlpParams {
            weight,
            bias,
            activation,
            version: 0,
        })
    }

    /// `W = [I | I] / 2`, zero bias: averages the two halves of a
    /// concatenated input before the activation.
    pub fn identity_averaging(dim: usize, activation: Activation) -> Self {
        let weight = Matrix::from_fn(dim, 2 * dim, |i, j| if j % dim == i { 0.5 } else { 0.0 });
        MlpParams {
            weight,
            bias: vec![0.0; dim],
            activation,
            version: 0,
        }
    }

    /// Gaussian init with standard deviation `gain / sqrt(in_dim)`.
    pub fn random(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, gain / (in_dim as f64).sqrt()).expect("positive std");
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| normal.sample(rng));
        MlpParams {
            weight,
            bias: vec![0.0; out_dim],
            activation,
            version: 0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Bumped on every in-place update; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.weight.shape() == other.weight.shape() && self.activation == other.activation
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "layer expects width {}, input has {}",
                self.in_dim(),
                input.cols()
            )));
        }
        let mut pre = input.matmul_t(&self.weight)?;
        for i in 0..pre.rows() {
            pre.row_mut(i)
                .iter_mut()
                .zip(&self.bias)
                .for_each(|(v, b)| *v += b);
        }
        let output = self.activation.apply(&pre);
        let cache = ForwardCache {
            input: input.clone(),
            pre,
            output: output.clone(),
            version: self.version,
            shape: self.weight.shape(),
        };
        Ok((output, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward(input)?.0)
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.version != self.version || cache.shape != self.weight.shape() {
            return Err(Error::Contract(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        if upstream.shape() != cache.output.shape() {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let g_pre = self.activation.backward(&cache.pre, &cache.output, upstream);
        let weight = g_pre.t_matmul(&cache.input)?;
        let mut bias = vec![0.0; self.out_dim()];
        for row in g_pre.row_iter() {
            bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let input_grad = g_pre.matmul(&self.weight)?;
        Ok((MlpGrads { weight, bias }, input_grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub iter: usize,
    pub total_iter: usize,
    pub momentum: f64,
}

impl OptimizerState {
    /// `base_lr · (1 − iter/total)^0.9`.
    pub fn lr(&self) -> f64 {
        let frac = (self.iter as f64 / self.total_iter as f64).min(1.0);
        self.base_lr * (1.0 - frac).powf(POLY_POWER)
    }
}

/// Momentum SGD over an ordered list of layers.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub state: OptimizerState,
    velocity: Vec<MlpGrads>,
}

impl Sgd {
    pub fn new(state: OptimizerState) -> Result<Self> {
        if !(state.base_lr >= 0.0 && state.base_lr.is_finite()) {
            return Err(Error::Param(format!("base_lr {} must be >= 0", state.base_lr)));
        }
        if state.total_iter == 0 {
            return Err(Error::Param("total_iter must be positive".into()));
        }
        if !(0.0..1.0).contains(&state.momentum) {
            return Err(Error::Param(format!("momentum {} outside [0, 1)", state.momentum)));
        }
        Ok(Sgd {
            state,
            velocity: Vec::new(),
        })
    }

    /// `v ← μ v + g; p ← p − lr(iter) v`, then advances `iter`.
    pub fn step(&mut self, params: &mut [&mut MlpParams], grads: &[MlpGrads]) -> Result<()> {
        if self.state.iter >= self.state.total_iter {
            return Err(Error::Contract(format!(
                "optimizer exhausted at iter {} of {}",
                self.state.iter, self.state.total_iter
            )));
        }
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} layers but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len() {
                return Err(Error::Dimension(format!("gradient {i} shape mismatch")));
            }
            if !g.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for layer {i} at iter {}",
                    self.state.iter
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| MlpGrads::zeros_like(p)).collect();
        }
        let lr = self.state.lr();
        let mu = self.state.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vw) in p
                .weight
                .as_mut_slice()
                .iter_mut()
                .zip(g.weight.as_slice())
                .zip(v.weight.as_mut_slice())
            {
                *vw = mu * *vw + gw;
                *w -= lr * *vw;
            }
            for ((b, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = mu * *vb + gb;
                *b -= lr * *vb;
            }
            p.touch();
        }
        self.state.iter += 1;
        Ok(())
    }
}

/// Exponential moving average of the student's layers.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub shadow: Vec<MlpParams>,
    pub decay: f64,
}

impl TeacherState {
    pub fn new(student: &[&MlpParams], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Param(format!("teacher decay {decay} outside [0, 1]")));
        }
        Ok(TeacherState {
            shadow: student.iter().map(|p| (*p).clone()).collect(),
            decay,
        })
    }

    /// `shadow ← decay · shadow + (1 − decay) · student`.
    pub fn update(&mut self, student: &[&MlpParams]) -> Result<()> {
        self.update_with(student, self.decay)
    }

    /// Decay capped at `1 − 1/(step + 1)`, so early shadows follow the
    /// student closely instead of averaging in the random init.
    pub fn update_ramped(&mut self, student: &[&MlpParams], step: usize) -> Result<()> {
        let cap = 1.0 - 1.0 / (step as f64 + 1.0);
        self.update_with(student, self.decay.min(cap))
    }

    fn update_with(&mut self, student: &[&MlpParams], d: f64) -> Result<()> {
        if student.len() != self.shadow.len()
            || self.shadow.iter().zip(student).any(|(s, p)| !s.same_shape(p))
        {
            return Err(Error::Contract("teacher and student layouts differ".into()));
        }
        for (s, p) in self.shadow.iter_mut().zip(student) {
            for (a, &b) in s.weight.as_mut_slice().iter_mut().zip(p.weight.as_slice()) {
                *a = d * *a + (1.0 - d) * b;
            }
            for (a, &b) in s.bias.iter_mut().zip(&p.bias) {
                *a = d * *a + (1.0 - d) * b;
            }
            s.touch();
        }
        Ok(())
    }
}
