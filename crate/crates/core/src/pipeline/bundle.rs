//! Versioned JSON checkpoints.
//!
//! Parameters travel as base64 strings of little-endian `f64` blobs, one per
//! parameter block, next to the architecture, the input standardization,
//! the seed and the training history.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BaselineModels, LevelModels, PipelineError, Result, TrainedDnn};
use crate::neural::autoencoder::{AeConfig, Autoencoder};
use crate::neural::dnn::{Dnn, DnnConfig};
use crate::neural::lstm::{Lstm, LstmConfig};
use crate::neural::train::TrainHistory;
use crate::neural::vae::{Vae, VaeConfig};
use crate::neural::{Parameterized, Standardizer};
use crate::seed;

pub const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Lstm,
    Dnn,
    Ae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: u32,
    pub kind: ModelKind,
    /// Contamination level the model was trained at, if any.
    pub level: Option<f64>,
    pub architecture: serde_json::Value,
    pub normalization: Option<Standardizer>,
    pub seed: u64,
    pub history: Option<TrainHistory>,
    pub params: Vec<ParamBlob>,
}

fn encode_params<M: Parameterized>(model: &M) -> Vec<ParamBlob> {
    model
        .params()
        .iter()
        .map(|t| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            ParamBlob { shape: t.shape().to_vec(), data: STANDARD.encode(bytes) }
        })
        .collect()
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Bundle(msg.into())
}

impl ModelBundle {
    fn new<M: Parameterized, A: Serialize>(
        kind: ModelKind,
        level: Option<f64>,
        architecture: &A,
        normalization: Option<Standardizer>,
        seed: u64,
        history: Option<TrainHistory>,
        model: &M,
    ) -> Self {
        Self {
            format: FORMAT,
            kind,
            level,
            architecture: serde_json::to_value(architecture).expect("architecture serializes"),
            normalization,
            seed,
            history,
            params: encode_params(model),
        }
    }

    fn check(&self, kind: ModelKind) -> Result<()> {
        if self.format != FORMAT {
            return Err(bad(format!("unsupported format {} (expected {FORMAT})", self.format)));
        }
        if self.kind != kind {
            return Err(bad(format!("expected a {kind:?} bundle, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn architecture<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.architecture.clone()).map_err(|e| bad(format!("architecture: {e}")))
    }

    fn normalization(&self) -> Result<Standardizer> {
        self.normalization.clone().ok_or_else(|| bad("missing normalization"))
    }

    /// Overwrite `model`'s parameters, checking every block's shape.
    fn load_into<M: Parameterized>(&self, model: &mut M) -> Result<()> {
        let mut blocks = model.params_mut();
        if blocks.len() != self.params.len() {
            return Err(bad(format!("{} parameter blocks, model has {}", self.params.len(), blocks.len())));
        }
        for (i, (blob, t)) in self.params.iter().zip(blocks.iter_mut()).enumerate() {
            if blob.shape != t.shape() {
                return Err(bad(format!("block {i}: shape {:?}, model expects {:?}", blob.shape, t.shape())));
            }
            let bytes = STANDARD.decode(&blob.data).map_err(|e| bad(format!("block {i}: {e}")))?;
            if bytes.len() != 8 * t.len() {
                return Err(bad(format!("block {i}: {} bytes for {} values", bytes.len(), t.len())));
            }
            for (v, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(())
    }

    pub fn from_vae(models: &LevelModels, seed: u64) -> Self {
        Self::new(
            ModelKind::Vae,
            Some(models.level),
            &models.vae.config,
            Some(models.norm.clone()),
            seed,
            Some(models.vae_history.clone()),
            &models.vae,
        )
    }

    pub fn from_lstm(models: &LevelModels, seed: u64) -> Self {
        Self::new(ModelKind::Lstm, Some(models.level), &models.lstm.config, None, seed, Some(models.lstm_history.clone()), &models.lstm)
    }

    pub fn from_dnn(trained: &TrainedDnn, seed: u64) -> Self {
        let d = &trained.dnn;
        Self::new(ModelKind::Dnn, None, &d.config, Some(d.norm.clone()), seed, Some(trained.history.clone()), d)
    }

    pub fn from_ae(models: &BaselineModels, seed: u64) -> Self {
        Self::new(
            ModelKind::Ae,
            Some(models.level),
            &models.ae.config,
            Some(models.norm.clone()),
            seed,
            Some(models.history.clone()),
            &models.ae,
        )
    }

    /// Rebuild the level models from a VAE and an LSTM bundle.
    pub fn to_level(vae: &ModelBundle, lstm: &ModelBundle) -> Result<LevelModels> {
        vae.check(ModelKind::Vae)?;
        lstm.check(ModelKind::Lstm)?;
        let level = vae.level.ok_or_else(|| bad("VAE bundle without level"))?;
        if lstm.level != Some(level) {
            return Err(bad(format!("VAE level {level} but LSTM level {:?}", lstm.level)));
        }
        let vae_cfg: VaeConfig = vae.architecture()?;
        let lstm_cfg: LstmConfig = lstm.architecture()?;
        if lstm_cfg.input_dim != vae_cfg.latent_dim {
            return Err(bad("LSTM input does not match the VAE latent size"));
        }
        let mut scratch = seed::stream(0, "bundle");
        let mut v = Vae::new(vae_cfg, &mut scratch);
        vae.load_into(&mut v)?;
        let mut l = Lstm::zeros(lstm_cfg);
        lstm.load_into(&mut l)?;
        let norm = vae.normalization()?;
        if norm.dim() != vae_cfg.input_dim {
            return Err(bad("normalization does not match the VAE input"));
        }
        Ok(LevelModels {
            level,
            norm,
            vae: v,
            lstm: l,
            vae_history: vae.history.clone().unwrap_or(TrainHistory { epochs: Vec::new(), best_epoch: 0 }),
            lstm_history: lstm.history.clone().unwrap_or(TrainHistory { epochs: Vec::new(), best_epoch: 0 }),
        })
    }

    pub fn to_dnn(&self) -> Result<Dnn> {
        self.check(ModelKind::Dnn)?;
        let cfg: DnnConfig = self.architecture()?;
        let mut d = Dnn::new(cfg, &mut seed::stream(0, "bundle"));
        self.load_into(&mut d)?;
        let norm = self.normalization()?;
        if norm.dim() != cfg.rows * cfg.d_z {
            return Err(bad("normalization does not match the classifier input"));
        }
        d.norm = norm;
        Ok(d)
    }

    pub fn to_baseline(&self) -> Result<BaselineModels> {
        self.check(ModelKind::Ae)?;
        let cfg: AeConfig = self.architecture()?;
        let mut ae = Autoencoder::new(cfg, &mut seed::stream(0, "bundle"));
        self.load_into(&mut ae)?;
        Ok(BaselineModels {
            level: self.level.ok_or_else(|| bad("AE bundle without level"))?,
            norm: self.normalization()?,
            ae,
            history: self.history.clone().unwrap_or(TrainHistory { epochs: Vec::new(), best_epoch: 0 }),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}
