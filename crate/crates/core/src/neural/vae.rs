//! Variational autoencoder with a diagonal Gaussian latent.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activation, Dense, Mlp, MlpCache, NeuralError, Parameterized, Result, Tensor};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// KL weight.
    pub beta: f64,
}

impl VaeConfig {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self { input_dim, latent_dim, hidden: 64, beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: Mlp,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    decoder: Mlp,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct VaeForward {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub eps: Vec<f64>,
    /// `mu + exp(logvar / 2) * eps`.
    pub sample: Vec<f64>,
    pub reconstruction: Vec<f64>,
    enc: MlpCache,
    dec: MlpCache,
}

impl Vae {
    pub fn new(config: VaeConfig, rng: &mut Rng) -> Self {
        let encoder = Mlp::new(&[config.input_dim, config.hidden], Activation::Relu, rng);
        let mu_head = Dense::new(config.hidden, config.latent_dim, rng);
        let logvar_head = Dense::new(config.hidden, config.latent_dim, rng);
        let decoder = Mlp::new(&[config.latent_dim, config.hidden, config.input_dim], Activation::Identity, rng);
        Self { config, encoder, mu_head, logvar_head, decoder }
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.input_dim {
            return Err(NeuralError::ShapeMismatch { expected: vec![self.config.input_dim], found: vec![z.len()] });
        }
        Ok(())
    }

    /// Latent mean and log-variance.
    pub fn encode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(z)?;
        let h = self.encoder.forward(z);
        Ok((self.mu_head.forward(&h), self.logvar_head.forward(&h)))
    }

    pub fn decode(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.config.latent_dim {
            return Err(NeuralError::ShapeMismatch { expected: vec![self.config.latent_dim], found: vec![s.len()] });
        }
        Ok(self.decoder.forward(s))
    }

    /// Forward pass with caller-provided standard-normal noise.
    pub fn forward_with_eps(&self, z: &[f64], eps: &[f64]) -> Result<VaeForward> {
        self.check(z)?;
        if eps.len() != self.config.latent_dim {
            return Err(NeuralError::ShapeMismatch { expected: vec![self.config.latent_dim], found: vec![eps.len()] });
        }
        let enc = self.encoder.forward_cached(z);
        let mu = self.mu_head.forward(&enc.output);
        let logvar = self.logvar_head.forward(&enc.output);
        let sample: Vec<f64> = (0..mu.len()).map(|k| mu[k] + (0.5 * logvar[k]).exp() * eps[k]).collect();
        let dec = self.decoder.forward_cached(&sample);
        let reconstruction = dec.output.clone();
        Ok(VaeForward { mu, logvar, eps: eps.to_vec(), sample, reconstruction, enc, dec })
    }

    /// Backpropagate [`vae_loss`] scaled by `scale` into `grads` (in
    /// `params()` order).
    pub fn backward(&self, z: &[f64], fwd: &VaeForward, scale: f64, grads: &mut [Tensor]) {
        let m = z.len() as f64;
        let beta = self.config.beta;
        let d_rec: Vec<f64> = fwd.reconstruction.iter().zip(z).map(|(r, x)| scale * 2.0 * (r - x) / m).collect();
        let (g_enc, rest) = grads.split_at_mut(2);
        let (g_mu, rest) = rest.split_at_mut(2);
        let (g_lv, g_dec) = rest.split_at_mut(2);
        let d_sample = self.decoder.backward(&fwd.dec, &d_rec, g_dec);
        let n = fwd.mu.len();
        let mut d_mu = vec![0.0; n];
        let mut d_lv = vec![0.0; n];
        for k in 0..n {
            let sigma = (0.5 * fwd.logvar[k]).exp();
            d_mu[k] = d_sample[k] + scale * beta * fwd.mu[k];
            d_lv[k] = d_sample[k] * fwd.eps[k] * 0.5 * sigma + scale * beta * 0.5 * (fwd.logvar[k].exp() - 1.0);
        }
        let (gw, gb) = g_mu.split_at_mut(1);
        let dh_mu = self.mu_head.backward(&fwd.enc.output, &d_mu, &mut gw[0], &mut gb[0]);
        let (gw, gb) = g_lv.split_at_mut(1);
        let dh_lv = self.logvar_head.backward(&fwd.enc.output, &d_lv, &mut gw[0], &mut gb[0]);
        let dh: Vec<f64> = dh_mu.iter().zip(&dh_lv).map(|(a, b)| a + b).collect();
        self.encoder.backward(&fwd.enc, &dh, g_enc);
    }
}

impl Parameterized for Vae {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.mu_head.params());
        p.extend(self.logvar_head.params());
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.mu_head.params_mut());
        p.extend(self.logvar_head.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }
}

pub fn standard_normal(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Encode, draw `s = mu + sigma * eps` from the seeded stream, decode.
pub fn vae_forward(model: &Vae, z: &[f64], rng: &mut Rng) -> Result<VaeForward> {
    let eps = standard_normal(model.latent_dim(), rng);
    model.forward_with_eps(z, &eps)
}

/// `KL(N(mu, diag exp(logvar)) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// Mean squared reconstruction error over channels.
pub fn reconstruction_mse(z: &[f64], reconstruction: &[f64]) -> f64 {
    z.iter().zip(reconstruction).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z.len() as f64
}

/// Reconstruction MSE plus `beta` times the KL regularizer.
pub fn vae_loss(model: &Vae, z: &[f64], fwd: &VaeForward) -> f64 {
    reconstruction_mse(z, &fwd.reconstruction) + model.config.beta * kl_divergence(&fwd.mu, &fwd.logvar)
}
