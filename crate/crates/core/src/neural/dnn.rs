//! Residual-fusion classifier with sample voting.
//!
//! Input is an `m x R x d_z` tensor: `m` latent samples, each holding `R`
//! residual rows. Block 1 embeds every row on its own, block 2 maps the
//! flattened row embeddings to class logits. The voted distribution is the
//! mean of the per-sample softmax outputs.

use serde::{Deserialize, Serialize};

use super::{softmax, Activation, Mlp, MlpCache, NeuralError, Parameterized, Result, Standardizer, Tensor};
use crate::seed::Rng;

/// Probabilities below this are clamped inside the log of the loss.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DnnConfig {
    /// Residual rows per sample.
    pub rows: usize,
    pub d_z: usize,
    pub feature: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl DnnConfig {
    pub fn new(rows: usize, d_z: usize, classes: usize) -> Self {
        Self { rows, d_z, feature: 32, hidden: 64, classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dnn {
    pub config: DnnConfig,
    /// Applied to each flattened `R x d_z` sample before block 1.
    pub norm: Standardizer,
    pub block1: Mlp,
    pub block2: Mlp,
}

#[derive(Debug, Clone)]
pub struct SampleCache {
    rows: Vec<MlpCache>,
    head: MlpCache,
}

#[derive(Debug, Clone)]
pub struct DnnForward {
    /// Per-sample class distributions.
    pub probs: Vec<Vec<f64>>,
    /// Mean of `probs`.
    pub voted: Vec<f64>,
    caches: Vec<SampleCache>,
}

impl DnnForward {
    pub fn predicted(&self) -> usize {
        argmax(&self.voted)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Dnn {
    pub fn new(config: DnnConfig, rng: &mut Rng) -> Self {
        let block1 = Mlp::new(&[config.d_z, config.feature], Activation::Relu, rng);
        let block2 = Mlp::new(
            &[config.rows * config.feature, config.hidden, config.classes],
            Activation::Identity,
            rng,
        );
        Self { config, norm: Standardizer::identity(config.rows * config.d_z), block1, block2 }
    }

    pub fn sample_len(&self) -> usize {
        self.config.rows * self.config.d_z
    }

    fn check(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        if s.len() != 3 || s[1] != self.config.rows || s[2] != self.config.d_z || s[0] == 0 {
            return Err(NeuralError::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(1).max(1), self.config.rows, self.config.d_z],
                found: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn sample(&self, x: &[f64]) -> (Vec<f64>, SampleCache) {
        let x = self.norm.apply(x);
        let d_z = self.config.d_z;
        let rows: Vec<MlpCache> = x.chunks(d_z).map(|r| self.block1.forward_cached(r)).collect();
        let flat: Vec<f64> = rows.iter().flat_map(|c| c.output.iter().copied()).collect();
        let head = self.block2.forward_cached(&flat);
        (softmax(&head.output), SampleCache { rows, head })
    }

    pub fn forward(&self, input: &Tensor) -> Result<DnnForward> {
        let m = self.check(input)?;
        let len = self.sample_len();
        let mut probs = Vec::with_capacity(m);
        let mut caches = Vec::with_capacity(m);
        for k in 0..m {
            let (p, c) = self.sample(&input.data()[k * len..(k + 1) * len]);
            probs.push(p);
            caches.push(c);
        }
        let voted = mean_rows(&probs);
        Ok(DnnForward { probs, voted, caches })
    }

    /// Distance of the nearest ReLU pre-activation in `fwd` from its kink.
    pub fn relu_margin(&self, fwd: &DnnForward) -> f64 {
        fwd.caches
            .iter()
            .flat_map(|c| c.rows.iter().map(|r| r.relu_margin(&self.block1)).chain([c.head.relu_margin(&self.block2)]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Backpropagate gradients wrt each sample's probabilities.
    pub fn backward(&self, fwd: &DnnForward, d_probs: &[Vec<f64>], grads: &mut [Tensor]) {
        let n1 = self.block1.params().len();
        let (g1, g2) = grads.split_at_mut(n1);
        let f = self.config.feature;
        for ((p, dp), cache) in fwd.probs.iter().zip(d_probs).zip(&fwd.caches) {
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            let d_logits: Vec<f64> = p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect();
            let d_flat = self.block2.backward(&cache.head, &d_logits, g2);
            for (r, rc) in cache.rows.iter().enumerate() {
                self.block1.backward(rc, &d_flat[r * f..(r + 1) * f], g1);
            }
        }
    }
}

impl Parameterized for Dnn {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.block1.params();
        p.extend(self.block2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.block1.params_mut();
        p.extend(self.block2.params_mut());
        p
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let m = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

pub fn dnn_forward(model: &Dnn, input: &Tensor) -> Result<DnnForward> {
    model.forward(input)
}

/// Cross-entropy of the voted distribution against `label`.
pub fn voted_cross_entropy(fwd: &DnnForward, label: usize) -> f64 {
    -fwd.voted[label].max(PROB_FLOOR).ln()
}

/// Gradient of [`voted_cross_entropy`] wrt each sample's probabilities,
/// scaled by `scale`.
pub fn voted_cross_entropy_grad(fwd: &DnnForward, label: usize, scale: f64) -> Vec<Vec<f64>> {
    let m = fwd.probs.len() as f64;
    let g = -scale / (m * fwd.voted[label].max(PROB_FLOOR));
    fwd.probs
        .iter()
        .map(|p| {
            let mut d = vec![0.0; p.len()];
            d[label] = g;
            d
        })
        .collect()
}

/// Mean per-sample cross-entropy, for training on samples as separate rows.
pub fn per_sample_cross_entropy(fwd: &DnnForward, label: usize) -> f64 {
    let m = fwd.probs.len() as f64;
    fwd.probs.iter().map(|p| -p[label].max(PROB_FLOOR).ln()).sum::<f64>() / m
}

pub fn per_sample_cross_entropy_grad(fwd: &DnnForward, label: usize, scale: f64) -> Vec<Vec<f64>> {
    let m = fwd.probs.len() as f64;
    fwd.probs
        .iter()
        .map(|p| {
            let mut d = vec![0.0; p.len()];
            d[label] = -scale / (m * p[label].max(PROB_FLOOR));
            d
        })
        .collect()
}
