//! Small dense-network core with hand-derived gradients.
//!
//! Everything works on one sample at a time; batches are loops over samples
//! with gradients accumulated in a fixed order, which keeps training
//! bit-reproducible.

pub mod autoencoder;
pub mod dnn;
pub mod gradcheck;
pub mod lstm;
pub mod train;
pub mod vae;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("window length {found} does not match model window {expected}")]
    WindowLength { expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset split")]
    EmptySplit,
}

pub type Result<T> = std::result::Result<T, NeuralError>;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NeuralError::ShapeMismatch { expected: shape, found: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row `i` of the trailing dimension.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// Models that expose their trainable parameter blocks in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grads(&self) -> Vec<Tensor> {
        self.params().into_iter().map(Tensor::zeros_like).collect()
    }

    fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters as one flat vector.
    fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor { shape: vec![rows, cols], data }
}

/// `y = W x + b`, `W` is `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self { w: glorot(output, input, rng), b: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.input_dim();
        self.b
            .data
            .iter()
            .enumerate()
            .map(|(o, b)| b + dot(&self.w.data[o * n_in..(o + 1) * n_in], x))
            .collect()
    }

    /// Accumulate `dW += dy x^T`, `db += dy`, return `W^T dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut Tensor, gb: &mut Tensor) -> Vec<f64> {
        let n_in = self.input_dim();
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb.data[o] += g;
            let row = &self.w.data[o * n_in..(o + 1) * n_in];
            let grow = &mut gw.data[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stack of dense layers, each followed by its activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

/// Inputs and pre-activations of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpCache {
    /// Smallest |pre-activation| over the units of `mlp` that use ReLU.
    pub fn relu_margin(&self, mlp: &Mlp) -> f64 {
        self.pre
            .iter()
            .zip(&mlp.activations)
            .filter(|(_, a)| **a == Activation::Relu)
            .flat_map(|(p, _)| p.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; hidden layers use ReLU, the last layer `last`.
    pub fn new(dims: &[usize], last: Activation, rng: &mut Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n).map(|i| Dense::new(dims[i], dims[i + 1], rng)).collect();
        let activations = (0..n).map(|i| if i + 1 == n { last } else { Activation::Relu }).collect();
        Self { layers, activations }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(&h).into_iter().map(|v| act.apply(v)).collect();
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let a = layer.forward(&h);
            let next = a.iter().map(|v| act.apply(*v)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }
        MlpCache { inputs, pre, output: h }
    }

    /// Backpropagate `dy` (gradient wrt the output). `grads` holds this
    /// network's blocks in `params()` order.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grads: &mut [Tensor]) -> Vec<f64> {
        let mut d = dy.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let act = self.activations[l];
            for (g, p) in d.iter_mut().zip(&cache.pre[l]) {
                *g *= act.derivative(*p);
            }
            let (gw, gb) = grads[2 * l..2 * l + 2].split_at_mut(1);
            d = layer.backward(&cache.inputs[l], &d, &mut gw[0], &mut gb[0]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Per-feature affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest std used when a feature is constant.
const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a, I>(rows: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..dim)
            .map(|j| (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
