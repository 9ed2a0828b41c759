//! Deterministic autoencoder used by the baseline detector.

use serde::{Deserialize, Serialize};

use super::{Activation, Mlp, MlpCache, NeuralError, Parameterized, Result, Tensor};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub input_dim: usize,
    pub code_dim: usize,
    pub hidden: usize,
}

impl AeConfig {
    pub fn new(input_dim: usize, code_dim: usize) -> Self {
        Self { input_dim, code_dim, hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct AeForward {
    enc: MlpCache,
    dec: MlpCache,
}

impl AeForward {
    pub fn reconstruction(&self) -> &[f64] {
        &self.dec.output
    }
}

impl Autoencoder {
    pub fn new(config: AeConfig, rng: &mut Rng) -> Self {
        let AeConfig { input_dim, code_dim, hidden } = config;
        Self {
            config,
            encoder: Mlp::new(&[input_dim, hidden, code_dim], Activation::Identity, rng),
            decoder: Mlp::new(&[code_dim, hidden, input_dim], Activation::Identity, rng),
        }
    }

    pub fn forward(&self, z: &[f64]) -> Result<AeForward> {
        if z.len() != self.config.input_dim {
            return Err(NeuralError::ShapeMismatch { expected: vec![self.config.input_dim], found: vec![z.len()] });
        }
        let enc = self.encoder.forward_cached(z);
        let dec = self.decoder.forward_cached(&enc.output);
        Ok(AeForward { enc, dec })
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(z)?.dec.output)
    }

    /// Accumulate `scale * d(mse)/d(theta)`.
    pub fn backward(&self, z: &[f64], fwd: &AeForward, scale: f64, grads: &mut [Tensor]) {
        let m = z.len() as f64;
        let d: Vec<f64> = fwd.dec.output.iter().zip(z).map(|(r, x)| scale * 2.0 * (r - x) / m).collect();
        let (g_enc, g_dec) = grads.split_at_mut(self.encoder.params().len());
        let d_code = self.decoder.backward(&fwd.dec, &d, g_dec);
        self.encoder.backward(&fwd.enc, &d_code, g_enc);
    }
}

impl Parameterized for Autoencoder {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

pub fn ae_loss(fwd: &AeForward, z: &[f64]) -> f64 {
    super::vae::reconstruction_mse(z, fwd.reconstruction())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck;
    use crate::neural::vae::standard_normal;
    use crate::seed;

    #[test]
    fn gradients_match_finite_differences() {
        for s in 0..5 {
            let mut rng = seed::stream(s, "ae-grad");
            let mut ae = Autoencoder::new(AeConfig { input_dim: 5, code_dim: 2, hidden: 6 }, &mut rng);
            let z = standard_normal(5, &mut rng);
            let fwd = ae.forward(&z).unwrap();
            let mut g = ae.zero_grads();
            ae.backward(&z, &fwd, 1.0, &mut g);
            let err = gradcheck::max_relative_error(&mut ae, &g, |a: &Autoencoder| ae_loss(&a.forward(&z).unwrap(), &z));
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn shape_checked() {
        let ae = Autoencoder::new(AeConfig::new(4, 2), &mut seed::stream(1, "ae"));
        assert!(ae.forward(&[0.0; 3]).is_err());
        assert_eq!(ae.reconstruct(&[0.0; 4]).unwrap().len(), 4);
    }
}
