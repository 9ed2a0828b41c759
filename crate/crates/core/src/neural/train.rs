//! Mini-batch Adam with early stopping on a held-out split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{NeuralError, Parameterized, Result, Tensor};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, max_epochs: 200, patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NeuralError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(NeuralError::InvalidConfig("batch size, max epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// A loss over indexed examples.
pub trait Objective {
    type Model: Parameterized + Clone;

    /// Mean loss over `batch`; adds the gradient of that mean into `grads`.
    fn loss_and_grad(&self, model: &Self::Model, batch: &[usize], rng: &mut Rng, grads: &mut [Tensor]) -> f64;

    /// Mean loss over `indices` without gradients.
    fn loss(&self, model: &Self::Model, indices: &[usize], rng: &mut Rng) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_test_loss(&self) -> f64 {
        self.epochs.get(self.best_epoch).map(|r| r.test_loss).unwrap_or(f64::NAN)
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<M: Parameterized>(model: &M, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: model.zero_grads(), v: model.zero_grads() }
    }

    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Chronological split: the first `fraction` of `0..n` trains, the rest tests.
pub fn chronological_split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = ((n as f64) * fraction).round() as usize;
    let cut = cut.min(n);
    ((0..cut).collect(), (cut..n).collect())
}

/// Train in place. The returned model parameters are those of the epoch with
/// the lowest test loss.
pub fn train<O: Objective>(
    model: &mut O::Model,
    objective: &O,
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(NeuralError::EmptySplit);
    }
    let mut shuffle = seed::stream(config.seed, "shuffle");
    let mut noise = seed::stream(config.seed, "train-noise");
    let mut adam = Adam::new(model, config.learning_rate);
    let mut order = train_idx.to_vec();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.zero_grads();
            let loss = objective.loss_and_grad(model, batch, &mut noise, &mut grads);
            if !loss.is_finite() {
                return Err(NeuralError::NonFiniteLoss { epoch, value: loss });
            }
            total += loss * batch.len() as f64;
            adam.step(model, &grads);
        }
        let train_loss = total / order.len() as f64;
        let test_loss = objective.loss(model, test_idx, &mut seed::stream(config.seed, "eval-noise"));
        if !test_loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss { epoch, value: test_loss });
        }
        epochs.push(EpochRecord { epoch, train_loss, test_loss });
        if test_loss < best_loss {
            best_loss = test_loss;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    *model = best;
    Ok(TrainHistory { epochs, best_epoch })
}
