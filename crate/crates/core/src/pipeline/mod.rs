//! Offline training and online detection.
//!
//! Per contamination level a VAE is trained on normal frames with a fraction
//! silently replaced by attack frames, and an LSTM on that VAE's embeddings.
//! One classifier is trained on residuals from the clean level and then
//! served with the models of every level.
//!
//! Residuals are expressed in units of each channel's sensor noise standard
//! deviation so the three residual rows share a scale.

pub mod bundle;
pub mod experiment;
pub mod metrics;

use std::collections::VecDeque;
use std::fmt;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimatorError, WlsEstimator};
use crate::neural::autoencoder::{ae_loss, AeConfig, Autoencoder};
use crate::neural::dnn::{self, Dnn, DnnConfig};
use crate::neural::lstm::{prediction_loss_grad, prediction_mse, Lstm, LstmConfig, Readout};
use crate::neural::train::{chronological_split, train, Objective, TrainConfig, TrainHistory};
use crate::neural::vae::{standard_normal, vae_forward, vae_loss, Vae, VaeConfig};
use crate::neural::{NeuralError, Parameterized, Standardizer, Tensor};
use crate::plant::{GridModel, PlantError};
use crate::seed::{self, Rng};
use crate::threat::{Dataset, ThreatError};

pub use metrics::{evaluate, EvaluationReport};

/// Fraction of every split that trains; the remainder is the test split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("contamination level {0} needs attack frames but the attack dataset is empty")]
    InsufficientAttackData(f64),
    #[error("cold start: {seen} of {window} window frames seen")]
    ColdStart { seen: usize, window: usize },
    #[error("classifier labels miss classes {missing:?}")]
    IncompleteLabelSet { missing: Vec<usize> },
    #[error("truth holds a single class")]
    DegenerateTruth,
    #[error("{predictions} predictions for {truth} truth labels")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error("data file: {0}")]
    Data(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Threat(#[from] ThreatError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub level: f64,
    /// Severity of the attack frames mixed in; informational.
    pub source_severity: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contaminated {
    pub data: Dataset,
    /// Sorted indices of replaced frames.
    pub replaced: Vec<usize>,
}

/// Replace `floor(level * N)` uniformly chosen normal frames by uniformly
/// drawn attack frames. Replaced frames keep the normal label.
pub fn contaminate(normal: &Dataset, attack: &Dataset, spec: &ContaminationSpec) -> Result<Contaminated> {
    if !(0.0..1.0).contains(&spec.level) {
        return Err(PipelineError::InvalidConfig(format!("contamination level {} outside [0, 1)", spec.level)));
    }
    let n = normal.len();
    let k = ((spec.level * n as f64) + 1e-9).floor() as usize;
    let mut data = normal.clone();
    if k == 0 {
        return Ok(Contaminated { data, replaced: Vec::new() });
    }
    if attack.is_empty() {
        return Err(PipelineError::InsufficientAttackData(spec.level));
    }
    let mut rng = seed::stream(spec.seed, "contaminate");
    let mut replaced = index::sample(&mut rng, n, k).into_vec();
    replaced.sort_unstable();
    for &i in &replaced {
        let j = rng.random_range(0..attack.len());
        data.frames[i].z = attack.frames[j].z.clone();
        data.known[i] = attack.known[j].clone();
    }
    Ok(Contaminated { data, replaced })
}

/// State-estimation residuals `z_bar - z` of every frame, in physical units.
pub fn se_residuals(grid: &GridModel, data: &Dataset, weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let est = WlsEstimator::new(grid, weights)?;
    data.frames
        .iter()
        .zip(&data.known)
        .map(|(f, k)| Ok(est.estimate(&f.z, k)?.residual))
        .collect()
}

fn scaled(a: &[f64], z: &[f64], scale: &[f64]) -> Vec<f64> {
    a.iter().zip(z).zip(scale).map(|((a, z), s)| (a - z) / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTriple {
    /// State estimation.
    pub se: Vec<f64>,
    /// VAE reconstruction.
    pub vae: Vec<f64>,
    /// LSTM prediction, decoded.
    pub lstm: Vec<f64>,
}

impl ResidualTriple {
    pub fn rows(&self) -> [&[f64]; 3] {
        [&self.se, &self.vae, &self.lstm]
    }
}

/// The VAE and LSTM of one contamination level with the channel
/// standardization they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelModels {
    pub level: f64,
    pub norm: Standardizer,
    pub vae: Vae,
    pub lstm: Lstm,
    pub vae_history: TrainHistory,
    pub lstm_history: TrainHistory,
}

impl LevelModels {
    pub fn window(&self) -> usize {
        self.lstm.window()
    }

    /// Encoder distribution of a raw frame.
    pub fn encode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(self.vae.encode(&self.norm.apply(z))?)
    }

    /// Decode an embedding back to physical units.
    pub fn decode(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.norm.invert(&self.vae.decode(s)?))
    }
}

/// Encoder distributions `(mu, log sigma^2)` of the most recent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBuffer {
    window: usize,
    items: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl WindowBuffer {
    pub fn new(window: usize) -> Self {
        Self { window, items: VecDeque::with_capacity(window + 1) }
    }

    pub fn push(&mut self, mu: Vec<f64>, logvar: Vec<f64>) {
        self.items.push_back((mu, logvar));
        if self.items.len() > self.window {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.items.len() == self.window
    }

    fn sample(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        self.items
            .iter()
            .map(|(mu, lv)| {
                let eps = standard_normal(mu.len(), rng);
                mu.iter().zip(lv).zip(eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect()
            })
            .collect()
    }
}

/// Stack `m` residual triples for frame `z` into an `m x 3 x d_z` tensor.
/// Each sample draws a fresh latent for `z` and for every buffered frame.
#[allow(clippy::too_many_arguments)]
pub fn fuse_residuals(
    z: &[f64],
    se_residual: &[f64],
    models: &LevelModels,
    scale: &[f64],
    buffer: &WindowBuffer,
    m: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !buffer.is_warm() {
        return Err(PipelineError::ColdStart { seen: buffer.len(), window: buffer.window });
    }
    let d = z.len();
    let se: Vec<f64> = se_residual.iter().zip(scale).map(|(r, s)| r / s).collect();
    let x = models.norm.apply(z);
    let mut data = Vec::with_capacity(m * 3 * d);
    for _ in 0..m {
        let fwd = vae_forward(&models.vae, &x, rng)?;
        let z_hat = models.norm.invert(&fwd.reconstruction);
        let window = buffer.sample(rng);
        let s_next = models.lstm.predict(&window)?;
        let z_pred = models.decode(&s_next)?;
        data.extend_from_slice(&se);
        data.extend(scaled(&z_hat, z, scale));
        data.extend(scaled(&z_pred, z, scale));
    }
    Ok(Tensor::new(vec![m, 3, d], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Voted class distribution.
    pub probs: Vec<f64>,
    pub class: usize,
}

impl Decision {
    pub fn attack_score(&self) -> f64 {
        1.0 - self.probs[0]
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class {} (p = {:.4})", self.class, self.probs[self.class])
    }
}

/// Per-stream residual fusion state.
pub struct ResidualFuser<'a> {
    models: &'a LevelModels,
    scale: &'a [f64],
    m: usize,
    buffer: WindowBuffer,
    rng: Rng,
}

impl<'a> ResidualFuser<'a> {
    pub fn new(models: &'a LevelModels, scale: &'a [f64], m: usize, seed: u64) -> Self {
        Self { models, scale, m, buffer: WindowBuffer::new(models.window()), rng: seed::stream(seed, "online") }
    }

    /// Fused tensor for this frame, `None` during cold start. The frame
    /// enters the window buffer afterwards.
    pub fn fuse(&mut self, z: &[f64], se_residual: &[f64]) -> Result<Option<Tensor>> {
        let out = match fuse_residuals(z, se_residual, self.models, self.scale, &self.buffer, self.m, &mut self.rng) {
            Ok(t) => Some(t),
            Err(PipelineError::ColdStart { .. }) => None,
            Err(e) => return Err(e),
        };
        let (mu, lv) = self.models.encode(z)?;
        self.buffer.push(mu, lv);
        Ok(out)
    }
}

/// Stateful per-stream detector: one frame in, one decision out.
pub struct OnlineDetector<'a> {
    fuser: ResidualFuser<'a>,
    dnn: &'a Dnn,
}

impl<'a> OnlineDetector<'a> {
    pub fn new(models: &'a LevelModels, dnn: &'a Dnn, scale: &'a [f64], m: usize, seed: u64) -> Self {
        Self { fuser: ResidualFuser::new(models, scale, m, seed), dnn }
    }

    pub fn step(&mut self, z: &[f64], se_residual: &[f64]) -> Result<Option<Decision>> {
        match self.fuser.fuse(z, se_residual)? {
            Some(t) => {
                let out = self.dnn.forward(&t)?;
                Ok(Some(Decision { class: out.predicted(), probs: out.voted }))
            }
            None => Ok(None),
        }
    }
}

/// Run one stream through a fresh detector. Cold-start frames map to `None`.
pub fn infer_online<'z, I>(stream: I, models: &LevelModels, dnn: &Dnn, scale: &[f64], m: usize, seed: u64) -> Result<Vec<Option<Decision>>>
where
    I: IntoIterator<Item = (&'z [f64], &'z [f64])>,
{
    let mut det = OnlineDetector::new(models, dnn, scale, m, seed);
    stream.into_iter().map(|(z, r)| det.step(z, r)).collect()
}

/// Architecture and inference settings shared by every level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent size; 0 means the grid's state dimension.
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub beta: f64,
    pub lstm_hidden: usize,
    pub window: usize,
    pub readout: Readout,
    pub dnn_feature: usize,
    pub dnn_hidden: usize,
    pub ae_hidden: usize,
    /// Latent samples per vote.
    pub samples: usize,
    pub dnn_loss: DnnLoss,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 0,
            vae_hidden: 64,
            beta: 0.1,
            lstm_hidden: 32,
            window: 12,
            readout: Readout::Hidden,
            dnn_feature: 32,
            dnn_hidden: 64,
            ae_hidden: 64,
            samples: 10,
            dnn_loss: DnnLoss::Stacked,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.vae_hidden, self.lstm_hidden, self.window, self.dnn_feature, self.dnn_hidden, self.ae_hidden, self.samples];
        if positive.contains(&0) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(PipelineError::InvalidConfig("model sizes must be positive and beta non-negative".into()));
        }
        Ok(())
    }

    pub fn latent_for(&self, grid: &GridModel) -> usize {
        if self.latent_dim == 0 {
            grid.state_dim()
        } else {
            self.latent_dim
        }
    }
}

/// How the classifier sees the `m` samples of a frame during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnnLoss {
    /// Cross-entropy of the voted distribution of the stacked tensor.
    #[default]
    Stacked,
    /// Mean cross-entropy over samples taken as separate rows.
    SeparateRows,
}

struct VaeObjective<'a> {
    x: &'a [Vec<f64>],
}

impl Objective for VaeObjective<'_> {
    type Model = Vae;

    fn loss_and_grad(&self, model: &Vae, batch: &[usize], rng: &mut Rng, grads: &mut [Tensor]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let fwd = vae_forward(model, &self.x[i], rng).expect("frames match the VAE input");
            loss += scale * vae_loss(model, &self.x[i], &fwd);
            model.backward(&self.x[i], &fwd, scale, grads);
        }
        loss
    }

    fn loss(&self, model: &Vae, idx: &[usize], rng: &mut Rng) -> f64 {
        idx.iter()
            .map(|&i| {
                let fwd = vae_forward(model, &self.x[i], rng).expect("frames match the VAE input");
                vae_loss(model, &self.x[i], &fwd)
            })
            .sum::<f64>()
            / idx.len() as f64
    }
}

struct LstmObjective<'a> {
    s: &'a [Vec<f64>],
    /// Start of each window; the target follows the window.
    starts: &'a [usize],
    w: usize,
}

impl Objective for LstmObjective<'_> {
    type Model = Lstm;

    fn loss_and_grad(&self, model: &Lstm, batch: &[usize], _: &mut Rng, grads: &mut [Tensor]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let a = self.starts[i];
            let un = model.unroll(&self.s[a..a + self.w]).expect("windows match the LSTM");
            let (l, mut d) = prediction_loss_grad(&un.prediction, &self.s[a + self.w]);
            d.iter_mut().for_each(|v| *v *= scale);
            loss += scale * l;
            model.backward(&un, &d, grads);
        }
        loss
    }

    fn loss(&self, model: &Lstm, idx: &[usize], _: &mut Rng) -> f64 {
        idx.iter()
            .map(|&i| {
                let a = self.starts[i];
                prediction_mse(&model.predict(&self.s[a..a + self.w]).expect("windows match the LSTM"), &self.s[a + self.w])
            })
            .sum::<f64>()
            / idx.len() as f64
    }
}

struct AeObjective<'a> {
    x: &'a [Vec<f64>],
}

impl Objective for AeObjective<'_> {
    type Model = Autoencoder;

    fn loss_and_grad(&self, model: &Autoencoder, batch: &[usize], _: &mut Rng, grads: &mut [Tensor]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let fwd = model.forward(&self.x[i]).expect("frames match the AE input");
            loss += scale * ae_loss(&fwd, &self.x[i]);
            model.backward(&self.x[i], &fwd, scale, grads);
        }
        loss
    }

    fn loss(&self, model: &Autoencoder, idx: &[usize], _: &mut Rng) -> f64 {
        idx.iter().map(|&i| ae_loss(&model.forward(&self.x[i]).expect("frames match the AE input"), &self.x[i])).sum::<f64>()
            / idx.len() as f64
    }
}

struct DnnObjective<'a> {
    inputs: &'a [Tensor],
    labels: &'a [usize],
    mode: DnnLoss,
}

impl DnnObjective<'_> {
    fn one(&self, model: &Dnn, i: usize, scale: f64, grads: Option<&mut [Tensor]>) -> f64 {
        let fwd = model.forward(&self.inputs[i]).expect("tensors match the classifier");
        let y = self.labels[i];
        let (loss, d) = match self.mode {
            DnnLoss::Stacked => (dnn::voted_cross_entropy(&fwd, y), dnn::voted_cross_entropy_grad(&fwd, y, scale)),
            DnnLoss::SeparateRows => {
                (dnn::per_sample_cross_entropy(&fwd, y), dnn::per_sample_cross_entropy_grad(&fwd, y, scale))
            }
        };
        if let Some(g) = grads {
            model.backward(&fwd, &d, g);
        }
        scale * loss
    }
}

impl Objective for DnnObjective<'_> {
    type Model = Dnn;

    fn loss_and_grad(&self, model: &Dnn, batch: &[usize], _: &mut Rng, grads: &mut [Tensor]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        batch.iter().map(|&i| self.one(model, i, scale, Some(&mut *grads))).sum()
    }

    fn loss(&self, model: &Dnn, idx: &[usize], _: &mut Rng) -> f64 {
        let scale = 1.0 / idx.len() as f64;
        idx.iter().map(|&i| self.one(model, i, scale, None)).sum()
    }
}

/// Training schedule of one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, max_epochs: 100, patience: 10 }
    }
}

impl Schedule {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

fn level_tag(level: f64) -> String {
    format!("{level}")
}

/// Train the VAE and LSTM of one level on (possibly contaminated) normal data.
pub fn train_level(
    grid: &GridModel,
    normal: &Dataset,
    level: f64,
    model: &ModelConfig,
    vae_schedule: &Schedule,
    lstm_schedule: &Schedule,
    seed: u64,
) -> Result<LevelModels> {
    model.validate()?;
    let tag = level_tag(level);
    let d = grid.layout().len();
    let (train_idx, test_idx) = chronological_split(normal.len(), TRAIN_FRACTION);
    let norm = Standardizer::fit(train_idx.iter().map(|&i| normal.frames[i].z.as_slice()), d);
    let x: Vec<Vec<f64>> = normal.frames.iter().map(|f| norm.apply(&f.z)).collect();

    let vae_cfg = VaeConfig { input_dim: d, latent_dim: model.latent_for(grid), hidden: model.vae_hidden, beta: model.beta };
    let mut vae = Vae::new(vae_cfg, &mut seed::stream(seed, &format!("init/vae/{tag}")));
    let vae_history = train(
        &mut vae,
        &VaeObjective { x: &x },
        &train_idx,
        &test_idx,
        &vae_schedule.with_seed(seed::derive_seed(seed, &format!("train/vae/{tag}"))),
    )?;

    let mut rng = seed::stream(seed, &format!("embed/{tag}"));
    let s: Vec<Vec<f64>> = x.iter().map(|xi| vae_forward(&vae, xi, &mut rng).map(|f| f.sample)).collect::<std::result::Result<_, _>>()?;
    let w = model.window;
    let starts: Vec<usize> = normal.episodes.iter().flat_map(|r| r.start..r.end.saturating_sub(w)).collect();
    let (lstm_train, lstm_test) = chronological_split(starts.len(), TRAIN_FRACTION);
    let lstm_cfg = LstmConfig { input_dim: vae_cfg.latent_dim, hidden: model.lstm_hidden, window: w, readout: model.readout };
    let mut lstm = Lstm::new(lstm_cfg, &mut seed::stream(seed, &format!("init/lstm/{tag}")));
    let lstm_history = train(
        &mut lstm,
        &LstmObjective { s: &s, starts: &starts, w },
        &lstm_train,
        &lstm_test,
        &lstm_schedule.with_seed(seed::derive_seed(seed, &format!("train/lstm/{tag}"))),
    )?;
    Ok(LevelModels { level, norm, vae, lstm, vae_history, lstm_history })
}

/// Classifier inputs of a labeled dataset in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Dataset frame of each input.
    pub frames: Vec<usize>,
}

/// Fused residual tensors for every post-cold-start frame. Each episode is
/// its own stream with a fresh window buffer.
pub fn proposed_features(
    data: &Dataset,
    se: &[Vec<f64>],
    models: &LevelModels,
    scale: &[f64],
    m: usize,
    seed: u64,
) -> Result<Features> {
    let mut out = Features { inputs: Vec::new(), labels: Vec::new(), frames: Vec::new() };
    for (e, range) in data.episodes.iter().enumerate() {
        let mut det = ResidualFuser::new(models, scale, m, seed::derive_seed(seed, &format!("episode/{e}")));
        for i in range.clone() {
            if let Some(t) = det.fuse(&data.frames[i].z, &se[i])? {
                out.inputs.push(t);
                out.labels.push(data.frames[i].label);
                out.frames.push(i);
            }
        }
    }
    Ok(out)
}

/// A trained classifier and what it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDnn {
    pub dnn: Dnn,
    pub history: TrainHistory,
    pub train_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Train a classifier with an 80/20 chronological split inside each class.
pub fn train_dnn(features: &Features, classes: usize, model: &ModelConfig, schedule: &Schedule, seed: u64) -> Result<TrainedDnn> {
    let mut missing: Vec<usize> = (0..classes).collect();
    missing.retain(|c| !features.labels.contains(c));
    if !missing.is_empty() {
        return Err(PipelineError::IncompleteLabelSet { missing });
    }
    let shape = features.inputs[0].shape().to_vec();
    let (rows, d) = (shape[1], shape[2]);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..classes {
        let idx: Vec<usize> = (0..features.labels.len()).filter(|&i| features.labels[i] == c).collect();
        let (a, b) = chronological_split(idx.len(), TRAIN_FRACTION);
        train_idx.extend(a.into_iter().map(|k| idx[k]));
        test_idx.extend(b.into_iter().map(|k| idx[k]));
    }
    let len = rows * d;
    let norm = Standardizer::fit(
        train_idx.iter().flat_map(|&i| features.inputs[i].data().chunks(len)),
        len,
    );
    let mut warnings = Vec::new();
    if norm.std.iter().all(|s| *s <= 1e-8) {
        warnings.push("ZeroVarianceInput: classifier inputs are constant".to_string());
    }
    let cfg = DnnConfig { rows, d_z: d, feature: model.dnn_feature, hidden: model.dnn_hidden, classes };
    let mut dnn = Dnn::new(cfg, &mut seed::stream(seed, "init/dnn"));
    dnn.norm = norm;
    let objective = DnnObjective { inputs: &features.inputs, labels: &features.labels, mode: model.dnn_loss };
    let history = train(&mut dnn, &objective, &train_idx, &test_idx, &schedule.with_seed(seed::derive_seed(seed, "train/dnn")))?;
    let correct = train_idx
        .iter()
        .filter(|&&i| dnn.forward(&features.inputs[i]).map(|f| f.predicted() == features.labels[i]).unwrap_or(false))
        .count();
    Ok(TrainedDnn { train_accuracy: correct as f64 / train_idx.len() as f64, dnn, history, warnings })
}

/// Classify prepared inputs; returns decisions aligned with `features`.
pub fn classify(dnn: &Dnn, features: &Features) -> Result<Vec<Decision>> {
    features
        .inputs
        .iter()
        .map(|t| {
            let out = dnn.forward(t)?;
            Ok(Decision { class: out.predicted(), probs: out.voted })
        })
        .collect()
}

/// Score decisions against the labels of `features`.
pub fn score(decisions: &[Decision], features: &Features, classes: usize) -> Result<EvaluationReport> {
    let predicted: Vec<usize> = decisions.iter().map(|d| d.class).collect();
    let scores: Vec<f64> = decisions.iter().map(Decision::attack_score).collect();
    evaluate(&predicted, &scores, &features.labels, classes)
}

/// Deterministic autoencoder of one level, with its channel standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModels {
    pub level: f64,
    pub norm: Standardizer,
    pub ae: Autoencoder,
    pub history: TrainHistory,
}

pub fn train_baseline_level(
    grid: &GridModel,
    normal: &Dataset,
    level: f64,
    model: &ModelConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<BaselineModels> {
    model.validate()?;
    let tag = level_tag(level);
    let d = grid.layout().len();
    let (train_idx, test_idx) = chronological_split(normal.len(), TRAIN_FRACTION);
    let norm = Standardizer::fit(train_idx.iter().map(|&i| normal.frames[i].z.as_slice()), d);
    let x: Vec<Vec<f64>> = normal.frames.iter().map(|f| norm.apply(&f.z)).collect();
    let cfg = AeConfig { input_dim: d, code_dim: model.latent_for(grid), hidden: model.ae_hidden };
    let mut ae = Autoencoder::new(cfg, &mut seed::stream(seed, &format!("init/ae/{tag}")));
    let history = train(
        &mut ae,
        &AeObjective { x: &x },
        &train_idx,
        &test_idx,
        &schedule.with_seed(seed::derive_seed(seed, &format!("train/ae/{tag}"))),
    )?;
    Ok(BaselineModels { level, norm, ae, history })
}

/// AE residual `(z_check - z) / sigma` as a `1 x 1 x d_z` tensor for every
/// frame after the first `skip` of each episode.
pub fn baseline_features(data: &Dataset, models: &BaselineModels, scale: &[f64], skip: usize) -> Result<Features> {
    let mut out = Features { inputs: Vec::new(), labels: Vec::new(), frames: Vec::new() };
    let d = scale.len();
    for range in &data.episodes {
        for i in range.start + skip.min(range.len())..range.end {
            let z = &data.frames[i].z;
            let rec = models.norm.invert(&models.ae.reconstruct(&models.norm.apply(z))?);
            out.inputs.push(Tensor::new(vec![1, 1, d], scaled(&rec, z, scale))?);
            out.labels.push(data.frames[i].label);
            out.frames.push(i);
        }
    }
    Ok(out)
}

/// Mean squared error of a reconstruction function over `idx`, in
/// standardized units.
pub fn reconstruction_mse<F>(data: &Dataset, norm: &Standardizer, idx: &[usize], mut reconstruct: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut total = 0.0;
    for &i in idx {
        let x = norm.apply(&data.frames[i].z);
        let r = reconstruct(&x)?;
        total += crate::neural::vae::reconstruction_mse(&x, &r);
    }
    Ok(total / idx.len() as f64)
}

/// Parameter fingerprint used to check that one classifier serves all levels.
pub fn parameter_hash<M: Parameterized>(model: &M) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in model.flat_params() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
