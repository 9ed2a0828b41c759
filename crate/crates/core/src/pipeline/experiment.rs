//! End-to-end experiments: datasets, per-level training, evaluation and the
//! files each stage reads and writes.
//!
//! Directory layout under the output directory:
//!
//! ```text
//! data/{normal,contaminant,dnn,test}.csv      labeled frames
//! data/{dnn,test}_se_residual.csv             state-estimation residuals
//! data/sweep_<severity>.csv (+ residuals)     severity sweep episodes
//! data/manifest.json
//! models/proposed/{vae_<l>,lstm_<l>,dnn,manifest}.json
//! models/ae/{ae_<l>,dnn,manifest}.json
//! models/curves/*.csv                         loss curves
//! report.json, confusion.csv, roc.csv
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::metrics::EvaluationReport;
use super::{
    baseline_features, classify, contaminate, parameter_hash, proposed_features, score, se_residuals, train_baseline_level,
    train_dnn, train_level, BaselineModels, ContaminationSpec, Decision, Features, LevelModels, ModelConfig, PipelineError, Result,
    Schedule, TrainedDnn,
};
use crate::io::{self, DataManifest, FileEntry};
use crate::neural::train::TrainHistory;
use crate::plant::{build_default_grid, GridModel, NoiseModel};
use crate::seed;
use crate::threat::{build_dataset, covert_scenarios, Dataset, EpisodeConfig, Scenario, ScenarioKind};

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Hours per episode.
    pub hours: usize,
    /// Normal episodes for the VAE, LSTM and AE.
    pub normal_episodes: usize,
    /// Contaminant episodes per attacked generator.
    pub contaminant_episodes: usize,
    /// Classifier episodes per class.
    pub dnn_episodes: usize,
    /// Held-out episodes per test scenario.
    pub test_episodes: usize,
    pub train_severity: f64,
    pub contaminant_severity: f64,
    pub noise_fraction: f64,
    /// Sweep episodes per generator and severity.
    pub sweep_episodes: usize,
    pub sweep_hours: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hours: 240,
            normal_episodes: 20,
            contaminant_episodes: 4,
            dnn_episodes: 6,
            test_episodes: 4,
            train_severity: 0.5,
            contaminant_severity: 0.4,
            noise_fraction: 0.01,
            sweep_episodes: 17,
            sweep_hours: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub vae: Schedule,
    pub lstm: Schedule,
    pub dnn: Schedule,
    pub ae: Schedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self { vae: s, lstm: s, dnn: s, ae: s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Grid TOML; the built-in 6-bus grid when absent.
    pub grid: Option<PathBuf>,
    /// Test scenarios TOML; normal plus a covert attack on every generator
    /// at the training severity when absent.
    pub scenario: Option<PathBuf>,
    pub levels: Vec<f64>,
    /// Covert severities of the sweep; empty disables it.
    pub severities: Vec<f64>,
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: None,
            scenario: None,
            levels: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            severities: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            output: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    /// Parse TOML; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for p in [&mut c.grid, &mut c.scenario].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if c.output.is_relative() {
            c.output = base.join(&c.output);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || !self.levels.contains(&0.0) {
            return Err(config_err("levels must include 0.0 (the classifier is trained on the clean level)"));
        }
        if let Some(l) = self.levels.iter().find(|l| !(0.0..1.0).contains(*l)) {
            return Err(config_err(format!("contamination level {l} outside [0, 1)")));
        }
        let sev = |s: f64| s > 0.0 && s <= 0.5;
        if let Some(s) = self.severities.iter().find(|s| !sev(**s)) {
            return Err(config_err(format!("severity {s} outside (0, 0.5]")));
        }
        let d = &self.data;
        if !sev(d.train_severity) || !sev(d.contaminant_severity) {
            return Err(config_err("train and contaminant severities must lie in (0, 0.5]"));
        }
        if d.hours <= self.model.window || d.sweep_hours <= self.model.window {
            return Err(config_err("episodes must be longer than the LSTM window"));
        }
        if d.normal_episodes == 0 || d.dnn_episodes == 0 || d.test_episodes == 0 {
            return Err(config_err("episode counts must be positive"));
        }
        if !(d.noise_fraction >= 0.0 && d.noise_fraction.is_finite()) {
            return Err(config_err("noise fraction must be non-negative"));
        }
        self.model.validate()
    }

    /// The grid named by the config, or the default grid.
    pub fn load_grid(&self) -> Result<GridModel> {
        match &self.grid {
            None => Ok(build_default_grid()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read grid file {}: {e}", p.display())))?;
                Ok(GridModel::from_toml_str(&text)?)
            }
        }
    }

    pub fn load_scenarios(&self, grid: &GridModel) -> Result<Vec<Scenario>> {
        match &self.scenario {
            None => {
                let mut s = vec![Scenario::normal()];
                s.extend(covert_scenarios(grid, self.data.train_severity));
                Ok(s)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read scenario file {}: {e}", p.display())))?;
                parse_scenarios(&text, grid, self.data.hours)
            }
        }
    }
}

/// One `[[scenarios]]` table. Generators are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub generator: Option<usize>,
    #[serde(default)]
    pub severity: f64,
    #[serde(default)]
    pub window: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenarios: Vec<ScenarioEntry>,
}

pub fn parse_scenarios(text: &str, grid: &GridModel, hours: usize) -> Result<Vec<Scenario>> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| config_err(format!("scenario file: {e}")))?;
    let mut out = Vec::new();
    for e in file.scenarios {
        let target = match (e.kind, e.generator) {
            (ScenarioKind::Normal, _) => None,
            (ScenarioKind::Fault, _) => return Err(config_err("fault scenarios have no classifier class")),
            (ScenarioKind::Covert, Some(g)) if g >= 1 => Some(g - 1),
            (ScenarioKind::Covert, _) => return Err(config_err("covert scenario needs generator >= 1")),
        };
        let s = Scenario { kind: e.kind, target, severity: e.severity, window: e.window.map(|[a, b]| (a, b)) };
        s.validate(grid, hours)?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(config_err("scenario file lists no scenarios"));
    }
    Ok(out)
}

/// Labeled frames and state-estimation residuals of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub data: Dataset,
    pub se: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSet {
    pub severity: f64,
    pub set: ResidualSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub grid: GridModel,
    pub noise_std: Vec<f64>,
    pub normal: Dataset,
    pub contaminant: Dataset,
    pub dnn: ResidualSet,
    pub test: ResidualSet,
    pub sweep: Vec<SweepSet>,
}

fn with_residuals(grid: &GridModel, data: Dataset, weights: &[f64]) -> Result<ResidualSet> {
    let se = se_residuals(grid, &data, weights)?;
    Ok(ResidualSet { data, se })
}

/// Generate every dataset of an experiment.
pub fn simulate(grid: &GridModel, config: &ExperimentConfig, scenarios: &[Scenario]) -> Result<ExperimentData> {
    config.validate()?;
    let d = &config.data;
    let s = config.seed;
    let noise = NoiseModel::relative(grid, d.noise_fraction)?;
    let weights = noise.weights();
    let ep = EpisodeConfig { hours: d.hours, noise_fraction: d.noise_fraction, ..Default::default() };
    let normal = build_dataset(grid, &[Scenario::normal()], d.normal_episodes, &ep, seed::derive_seed(s, "data/normal"))?;
    let contaminant = if d.contaminant_episodes == 0 {
        Dataset::empty(grid)
    } else {
        build_dataset(
            grid,
            &covert_scenarios(grid, d.contaminant_severity),
            d.contaminant_episodes,
            &ep,
            seed::derive_seed(s, "data/contaminant"),
        )?
    };
    let mut dnn_scenarios = vec![Scenario::normal()];
    dnn_scenarios.extend(covert_scenarios(grid, d.train_severity));
    let dnn = build_dataset(grid, &dnn_scenarios, d.dnn_episodes, &ep, seed::derive_seed(s, "data/dnn"))?;
    let test = build_dataset(grid, scenarios, d.test_episodes, &ep, seed::derive_seed(s, "data/test"))?;
    let sweep_ep = EpisodeConfig { hours: d.sweep_hours, ..ep.clone() };
    let sweep = config
        .severities
        .iter()
        .map(|&sev| {
            let data = build_dataset(
                grid,
                &covert_scenarios(grid, sev),
                d.sweep_episodes,
                &sweep_ep,
                seed::derive_seed(s, &format!("data/sweep/{sev}")),
            )?;
            Ok(SweepSet { severity: sev, set: with_residuals(grid, data, &weights)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentData {
        grid: grid.clone(),
        noise_std: noise.std.clone(),
        normal,
        contaminant,
        dnn: with_residuals(grid, dnn, &weights)?,
        test: with_residuals(grid, test, &weights)?,
        sweep,
    })
}

/// Which detectors to train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Ae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Ae => "ae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "proposed" | "vae" => Some(Method::Proposed),
            "ae" => Some(Method::Ae),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposedModels {
    pub levels: Vec<LevelModels>,
    pub dnn: TrainedDnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSet {
    pub levels: Vec<BaselineModels>,
    pub dnn: TrainedDnn,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OfflineModels {
    pub proposed: Option<ProposedModels>,
    pub baseline: Option<BaselineSet>,
}

/// Progress sink; messages go to standard error in the CLI.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn quiet(_: &str) {}

fn contaminated(data: &ExperimentData, config: &ExperimentConfig, level: f64) -> Result<Dataset> {
    let spec = ContaminationSpec {
        level,
        source_severity: config.data.contaminant_severity,
        seed: seed::derive_seed(config.seed, &format!("contaminate/{level}")),
    };
    Ok(contaminate(&data.normal, &data.contaminant, &spec)?.data)
}

/// Run `f` over `levels` on up to `jobs` threads, keeping level order.
fn per_level<T: Send, F>(levels: &[f64], jobs: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(f64) -> Result<T> + Sync,
{
    if jobs <= 1 || levels.len() <= 1 {
        return levels.iter().map(|&l| f(l)).collect();
    }
    let mut out = Vec::with_capacity(levels.len());
    for chunk in levels.chunks(jobs) {
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&l| { let f = &f; s.spawn(move || f(l)) }).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Train the proposed detector: VAE and LSTM per level, one classifier on
/// clean-level residuals.
pub fn train_proposed(data: &ExperimentData, config: &ExperimentConfig, jobs: usize, progress: Progress) -> Result<ProposedModels> {
    let levels = per_level(&config.levels, jobs, |level| {
        let normal = contaminated(data, config, level)?;
        let m = train_level(&data.grid, &normal, level, &config.model, &config.train.vae, &config.train.lstm, config.seed)?;
        progress(&format!(
            "level {level}: vae {} epochs (test {:.4}), lstm {} epochs (test {:.4})",
            m.vae_history.epochs.len(),
            m.vae_history.best_test_loss(),
            m.lstm_history.epochs.len(),
            m.lstm_history.best_test_loss()
        ));
        Ok(m)
    })?;
    let clean = levels.iter().find(|m| m.level == 0.0).expect("validated levels include 0.0");
    let features = proposed_features(
        &data.dnn.data,
        &data.dnn.se,
        clean,
        &data.noise_std,
        config.model.samples,
        seed::derive_seed(config.seed, "features/dnn"),
    )?;
    let dnn = train_dnn(&features, data.dnn.data.n_classes, &config.model, &config.train.dnn, config.seed)?;
    progress(&format!("classifier: {} epochs, train accuracy {:.4}", dnn.history.epochs.len(), dnn.train_accuracy));
    Ok(ProposedModels { levels, dnn })
}

/// Train the AE baseline the same way: AE per level, one classifier on the
/// clean AE's residuals.
pub fn train_baseline(data: &ExperimentData, config: &ExperimentConfig, jobs: usize, progress: Progress) -> Result<BaselineSet> {
    let levels = per_level(&config.levels, jobs, |level| {
        let normal = contaminated(data, config, level)?;
        let m = train_baseline_level(&data.grid, &normal, level, &config.model, &config.train.ae, config.seed)?;
        progress(&format!("level {level}: ae {} epochs (test {:.4})", m.history.epochs.len(), m.history.best_test_loss()));
        Ok(m)
    })?;
    let clean = levels.iter().find(|m| m.level == 0.0).expect("validated levels include 0.0");
    let features = baseline_features(&data.dnn.data, clean, &data.noise_std, config.model.window)?;
    let dnn = train_dnn(&features, data.dnn.data.n_classes, &config.model, &config.train.dnn, seed::derive_seed(config.seed, "baseline"))?;
    progress(&format!("baseline classifier: {} epochs, train accuracy {:.4}", dnn.history.epochs.len(), dnn.train_accuracy));
    Ok(BaselineSet { levels, dnn })
}

pub fn train_offline(
    data: &ExperimentData,
    config: &ExperimentConfig,
    methods: &[Method],
    jobs: usize,
    progress: Progress,
) -> Result<OfflineModels> {
    let mut out = OfflineModels::default();
    if methods.contains(&Method::Proposed) {
        out.proposed = Some(train_proposed(data, config, jobs, progress)?);
    }
    if methods.contains(&Method::Ae) {
        out.baseline = Some(train_baseline(data, config, jobs, progress)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: Method,
    pub level: f64,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub severity: f64,
    /// Mean voted attack probability over every decided frame.
    pub mean_attack_probability: f64,
    /// The same mean per episode.
    pub episode_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: u32,
    pub seed: u64,
    pub entries: Vec<ReportEntry>,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
    /// Parameter fingerprint of the proposed classifier.
    pub dnn_hash: Option<String>,
}

impl ExperimentReport {
    pub fn entry(&self, method: Method, level: f64) -> Option<&EvaluationReport> {
        self.entries.iter().find(|e| e.method == method && e.level == level).map(|e| &e.report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Data(format!("report: {e}")))
    }
}

/// Proposed detector on the test set at one level.
pub fn evaluate_level(data: &ExperimentData, config: &ExperimentConfig, models: &LevelModels, dnn: &TrainedDnn) -> Result<EvaluationReport> {
    let f = proposed_features(
        &data.test.data,
        &data.test.se,
        models,
        &data.noise_std,
        config.model.samples,
        seed::derive_seed(config.seed, "features/test"),
    )?;
    check_features(&f, &dnn.dnn)?;
    score(&classify(&dnn.dnn, &f)?, &f, data.test.data.n_classes)
}

pub fn evaluate_baseline_level(data: &ExperimentData, config: &ExperimentConfig, models: &BaselineModels, dnn: &TrainedDnn) -> Result<EvaluationReport> {
    let f = baseline_features(&data.test.data, models, &data.noise_std, config.model.window)?;
    check_features(&f, &dnn.dnn)?;
    let mut r = score(&classify(&dnn.dnn, &f)?, &f, data.test.data.n_classes)?;
    r.warnings.extend(dnn.warnings.iter().cloned());
    Ok(r)
}

fn check_features(f: &Features, dnn: &crate::neural::dnn::Dnn) -> Result<()> {
    if let Some(t) = f.inputs.first() {
        let s = t.shape();
        if s[1] != dnn.config.rows || s[2] != dnn.config.d_z {
            return Err(PipelineError::Bundle(format!(
                "classifier expects {} x {} inputs, data gives {} x {}",
                dnn.config.rows, dnn.config.d_z, s[1], s[2]
            )));
        }
    }
    Ok(())
}

/// Mean voted attack probability of the clean-level detector per severity.
pub fn severity_sweep(data: &ExperimentData, config: &ExperimentConfig, models: &ProposedModels) -> Result<Vec<SweepPoint>> {
    let clean = models.levels.iter().find(|m| m.level == 0.0).expect("validated levels include 0.0");
    data.sweep
        .iter()
        .map(|s| {
            let f = proposed_features(
                &s.set.data,
                &s.set.se,
                clean,
                &data.noise_std,
                config.model.samples,
                seed::derive_seed(config.seed, &format!("features/sweep/{}", s.severity)),
            )?;
            let d = classify(&models.dnn.dnn, &f)?;
            let mut sums = vec![(0.0, 0usize); s.set.data.episodes.len()];
            for (dec, &frame) in d.iter().zip(&f.frames) {
                if s.set.data.frames[frame].label == 0 {
                    continue;
                }
                let e = s.set.data.episodes.iter().position(|r| r.contains(&frame)).expect("frame in an episode");
                sums[e].0 += dec.attack_score();
                sums[e].1 += 1;
            }
            let episode_means: Vec<f64> = sums.iter().filter(|s| s.1 > 0).map(|(a, n)| a / *n as f64).collect();
            let (total, n) = sums.iter().fold((0.0, 0), |acc, s| (acc.0 + s.0, acc.1 + s.1));
            Ok(SweepPoint { severity: s.severity, mean_attack_probability: total / n.max(1) as f64, episode_means })
        })
        .collect()
}

pub fn evaluate_all(data: &ExperimentData, config: &ExperimentConfig, models: &OfflineModels, progress: Progress) -> Result<ExperimentReport> {
    let mut entries = Vec::new();
    let mut sweep = Vec::new();
    let mut dnn_hash = None;
    if let Some(p) = &models.proposed {
        for m in &p.levels {
            let report = evaluate_level(data, config, m, &p.dnn)?;
            progress(&format!("proposed level {}: accuracy {:.4}", m.level, report.accuracy));
            entries.push(ReportEntry { method: Method::Proposed, level: m.level, report });
        }
        sweep = severity_sweep(data, config, p)?;
        dnn_hash = Some(parameter_hash(&p.dnn.dnn));
    }
    if let Some(b) = &models.baseline {
        for m in &b.levels {
            let report = evaluate_baseline_level(data, config, m, &b.dnn)?;
            progress(&format!("ae level {}: accuracy {:.4}", m.level, report.accuracy));
            entries.push(ReportEntry { method: Method::Ae, level: m.level, report });
        }
    }
    Ok(ExperimentReport { format: REPORT_FORMAT, seed: config.seed, entries, sweep, dnn_hash })
}

/// Simulate, train and evaluate in memory.
pub fn run_experiment(config: &ExperimentConfig, methods: &[Method], jobs: usize, progress: Progress) -> Result<(ExperimentData, OfflineModels, ExperimentReport)> {
    let grid = config.load_grid()?;
    let scenarios = config.load_scenarios(&grid)?;
    let data = simulate(&grid, config, &scenarios)?;
    let models = train_offline(&data, config, methods, jobs, progress)?;
    let report = evaluate_all(&data, config, &models, progress)?;
    Ok((data, models, report))
}

// ---- files ----

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn method_dir(out: &Path, method: Method) -> PathBuf {
    out.join("models").join(method.name())
}

fn sweep_name(severity: f64) -> String {
    format!("sweep_{severity}")
}

/// Write every dataset and the data manifest; returns the manifest.
pub fn write_data(out: &Path, data: &ExperimentData, config: &ExperimentConfig) -> Result<DataManifest> {
    let dir = data_dir(out);
    let g = &data.grid;
    let mut files = Vec::new();
    let mut add = |name: String, rows: usize| -> Result<()> {
        let sha256 = io::sha256_file(&dir.join(&name))?;
        files.push(FileEntry { name, rows, sha256 });
        Ok(())
    };
    for (name, d) in [("normal", &data.normal), ("contaminant", &data.contaminant)] {
        io::write_dataset(&dir.join(format!("{name}.csv")), g, d)?;
        add(format!("{name}.csv"), d.len())?;
    }
    let mut sets: Vec<(String, &ResidualSet)> = vec![("dnn".into(), &data.dnn), ("test".into(), &data.test)];
    sets.extend(data.sweep.iter().map(|s| (sweep_name(s.severity), &s.set)));
    for (name, set) in sets {
        io::write_dataset(&dir.join(format!("{name}.csv")), g, &set.data)?;
        add(format!("{name}.csv"), set.data.len())?;
        io::write_residuals(&dir.join(format!("{name}_se_residual.csv")), g, &set.data, &set.se)?;
        add(format!("{name}_se_residual.csv"), set.se.len())?;
    }
    let manifest = DataManifest {
        format: io::FORMAT,
        seed: config.seed,
        channel_names: g.channel_names(),
        noise_std: data.noise_std.clone(),
        files,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(config_err(format!("missing data file {} (run simulate first)", path.display())))
    }
}

fn read_set(dir: &Path, name: &str, grid: &GridModel) -> Result<ResidualSet> {
    let data = io::read_dataset(require(&dir.join(format!("{name}.csv")))?, grid)?;
    let se = io::read_residuals(require(&dir.join(format!("{name}_se_residual.csv")))?, grid, data.len())?;
    Ok(ResidualSet { data, se })
}

/// Read the datasets written by [`write_data`].
pub fn read_data(out: &Path, grid: &GridModel, config: &ExperimentConfig) -> Result<ExperimentData> {
    let dir = data_dir(out);
    let manifest = DataManifest::read(require(&dir.join("manifest.json"))?)?;
    if manifest.channel_names != grid.channel_names() {
        return Err(PipelineError::Data("data manifest channels do not match the grid".into()));
    }
    let normal = io::read_dataset(require(&dir.join("normal.csv"))?, grid)?;
    let contaminant_path = dir.join("contaminant.csv");
    let contaminant = if !contaminant_path.exists() && config.levels.iter().all(|&l| l == 0.0) {
        Dataset::empty(grid)
    } else {
        io::read_dataset(require(&contaminant_path)?, grid)?
    };
    let sweep = config
        .severities
        .iter()
        .map(|&s| Ok(SweepSet { severity: s, set: read_set(&dir, &sweep_name(s), grid)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentData {
        grid: grid.clone(),
        noise_std: manifest.noise_std,
        normal,
        contaminant,
        dnn: read_set(&dir, "dnn", grid)?,
        test: read_set(&dir, "test", grid)?,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: u32,
    pub method: Method,
    pub seed: u64,
    pub levels: Vec<f64>,
    pub files: Vec<String>,
    pub dnn_hash: String,
}

fn write_curve(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut text = String::from("epoch,train_loss,test_loss\n");
    for r in &h.epochs {
        text.push_str(&format!("{},{},{}\n", r.epoch, io::fmt_value(r.train_loss), io::fmt_value(r.test_loss)));
    }
    io::write_text(path, &text)
}

fn save(dir: &Path, name: &str, b: &ModelBundle, files: &mut Vec<String>) -> Result<()> {
    io::write_text(&dir.join(name), &(b.to_json() + "\n"))?;
    files.push(name.to_string());
    Ok(())
}

pub fn write_models(out: &Path, config: &ExperimentConfig, models: &OfflineModels) -> Result<()> {
    let curves = out.join("models").join("curves");
    let s = config.seed;
    if let Some(p) = &models.proposed {
        let dir = method_dir(out, Method::Proposed);
        let mut files = Vec::new();
        for m in &p.levels {
            save(&dir, &format!("vae_{}.json", m.level), &ModelBundle::from_vae(m, s), &mut files)?;
            save(&dir, &format!("lstm_{}.json", m.level), &ModelBundle::from_lstm(m, s), &mut files)?;
            write_curve(&curves.join(format!("vae_{}.csv", m.level)), &m.vae_history)?;
            write_curve(&curves.join(format!("lstm_{}.csv", m.level)), &m.lstm_history)?;
        }
        save(&dir, "dnn.json", &ModelBundle::from_dnn(&p.dnn, s), &mut files)?;
        write_curve(&curves.join("dnn.csv"), &p.dnn.history)?;
        let manifest = ModelManifest {
            format: REPORT_FORMAT,
            method: Method::Proposed,
            seed: s,
            levels: p.levels.iter().map(|m| m.level).collect(),
            files,
            dnn_hash: parameter_hash(&p.dnn.dnn),
        };
        io::write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"))?;
    }
    if let Some(b) = &models.baseline {
        let dir = method_dir(out, Method::Ae);
        let mut files = Vec::new();
        for m in &b.levels {
            save(&dir, &format!("ae_{}.json", m.level), &ModelBundle::from_ae(m, s), &mut files)?;
            write_curve(&curves.join(format!("ae_{}.csv", m.level)), &m.history)?;
        }
        save(&dir, "dnn.json", &ModelBundle::from_dnn(&b.dnn, s), &mut files)?;
        write_curve(&curves.join("dnn_ae.csv"), &b.dnn.history)?;
        let manifest = ModelManifest {
            format: REPORT_FORMAT,
            method: Method::Ae,
            seed: s,
            levels: b.levels.iter().map(|m| m.level).collect(),
            files,
            dnn_hash: parameter_hash(&b.dnn.dnn),
        };
        io::write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"))?;
    }
    Ok(())
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    if !path.exists() {
        return Err(PipelineError::Bundle(format!("missing model file {}", path.display())));
    }
    ModelBundle::load(path)
}

fn read_manifest(dir: &Path, method: Method) -> Result<ModelManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(PipelineError::Bundle(format!("no trained {} models at {}", method.name(), dir.display())));
    }
    let m: ModelManifest = serde_json::from_str(&io::read_text(&path)?).map_err(|e| PipelineError::Bundle(e.to_string()))?;
    if m.format != REPORT_FORMAT || m.method != method {
        return Err(PipelineError::Bundle(format!("{}: unexpected format or method", path.display())));
    }
    Ok(m)
}

fn loaded_dnn(b: &ModelBundle) -> Result<TrainedDnn> {
    Ok(TrainedDnn {
        dnn: b.to_dnn()?,
        history: b.history.clone().unwrap_or(TrainHistory { epochs: Vec::new(), best_epoch: 0 }),
        train_accuracy: f64::NAN,
        warnings: Vec::new(),
    })
}

/// Load the trained models of `methods` written by [`write_models`].
pub fn read_models(out: &Path, methods: &[Method]) -> Result<OfflineModels> {
    let mut models = OfflineModels::default();
    for &method in methods {
        let dir = method_dir(out, method);
        let manifest = read_manifest(&dir, method)?;
        let dnn = loaded_dnn(&load_bundle(&dir.join("dnn.json"))?)?;
        if parameter_hash(&dnn.dnn) != manifest.dnn_hash {
            return Err(PipelineError::Bundle("classifier parameters do not match the manifest hash".into()));
        }
        match method {
            Method::Proposed => {
                let levels = manifest
                    .levels
                    .iter()
                    .map(|l| {
                        let vae = load_bundle(&dir.join(format!("vae_{l}.json")))?;
                        let lstm = load_bundle(&dir.join(format!("lstm_{l}.json")))?;
                        ModelBundle::to_level(&vae, &lstm)
                    })
                    .collect::<Result<Vec<_>>>()?;
                models.proposed = Some(ProposedModels { levels, dnn });
            }
            Method::Ae => {
                let levels = manifest
                    .levels
                    .iter()
                    .map(|l| load_bundle(&dir.join(format!("ae_{l}.json")))?.to_baseline())
                    .collect::<Result<Vec<_>>>()?;
                models.baseline = Some(BaselineSet { levels, dnn });
            }
        }
    }
    Ok(models)
}

/// Per-frame decisions of one detector over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Dataset frame of each decision; cold-start frames have none.
    pub frames: Vec<usize>,
    pub decisions: Vec<Decision>,
}

/// Run a trained detector over every episode of `set`, each as its own
/// online stream.
pub fn infer(
    set: &ResidualSet,
    noise_std: &[f64],
    config: &ExperimentConfig,
    models: &OfflineModels,
    method: Method,
    level: f64,
) -> Result<Inference> {
    let missing = || config_err(format!("no {} models trained at level {level}", method.name()));
    let (features, dnn) = match method {
        Method::Proposed => {
            let p = models.proposed.as_ref().ok_or_else(missing)?;
            let m = p.levels.iter().find(|m| m.level == level).ok_or_else(missing)?;
            let f = proposed_features(&set.data, &set.se, m, noise_std, config.model.samples, seed::derive_seed(config.seed, "infer"))?;
            (f, &p.dnn.dnn)
        }
        Method::Ae => {
            let b = models.baseline.as_ref().ok_or_else(missing)?;
            let m = b.levels.iter().find(|m| m.level == level).ok_or_else(missing)?;
            (baseline_features(&set.data, m, noise_std, config.model.window)?, &b.dnn.dnn)
        }
    };
    check_features(&features, dnn)?;
    let decisions = classify(dnn, &features)?;
    Ok(Inference { frames: features.frames, decisions })
}

/// `episode,t,label,predicted,p_0..p_{C-1}` for every decided frame.
pub fn decisions_csv(data: &Dataset, inference: &Inference) -> String {
    let classes = inference.decisions.first().map_or(data.n_classes, |d| d.probs.len());
    let mut out = String::from("episode,t,label,predicted");
    for c in 0..classes {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for (&i, d) in inference.frames.iter().zip(&inference.decisions) {
        let e = data.episodes.iter().position(|r| r.contains(&i)).expect("frame in an episode");
        let f = &data.frames[i];
        out.push_str(&format!("{e},{},{},{}", f.t, f.label, d.class));
        for p in &d.probs {
            out.push_str(&format!(",{}", io::fmt_value(*p)));
        }
        out.push('\n');
    }
    out
}

/// Write `report.json`, `confusion.csv` and `roc.csv`.
pub fn write_report(out: &Path, report: &ExperimentReport) -> Result<()> {
    io::write_text(&out.join("report.json"), &report.to_json())?;
    let mut confusion = String::from("method,level,truth,predicted,count\n");
    let mut roc = String::from("method,level,threshold,fpr,tpr\n");
    for e in &report.entries {
        let name = e.method.name();
        for (t, row) in e.report.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                confusion.push_str(&format!("{name},{},{t},{p},{n}\n", e.level));
            }
        }
        for pt in &e.report.roc {
            roc.push_str(&format!("{name},{},{},{},{}\n", e.level, io::fmt_value(pt.threshold), io::fmt_value(pt.fpr), io::fmt_value(pt.tpr)));
        }
    }
    io::write_text(&out.join("confusion.csv"), &confusion)?;
    io::write_text(&out.join("roc.csv"), &roc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string(), Path::new("/tmp")).unwrap();
        assert_eq!(back.levels, c.levels);
        assert_eq!(back.output, PathBuf::from("/tmp/out"));
        let err = ExperimentConfig::from_toml_str("levels = [0.1]", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("0.0"));
        assert!(ExperimentConfig::from_toml_str("bogus = 1", Path::new(".")).is_err());
    }

    #[test]
    fn scenario_file_uses_one_based_generators() {
        let g = build_default_grid();
        let text = r#"
[[scenarios]]
kind = "normal"

[[scenarios]]
kind = "covert"
generator = 2
severity = 0.3
window = [10, 20]
"#;
        let s = parse_scenarios(text, &g, 40).unwrap();
        assert_eq!(s[1], Scenario::covert(1, 0.3).with_window(10, 20));
        let fault = "[[scenarios]]\nkind = \"fault\"\ngenerator = 1\nseverity = 0.2\n";
        assert!(parse_scenarios(fault, &g, 40).is_err());
        let bad = "[[scenarios]]\nkind = \"covert\"\ngenerator = 9\nseverity = 0.2\n";
        assert!(parse_scenarios(bad, &g, 40).is_err());
    }

    #[test]
    fn methods_parse() {
        assert_eq!(Method::parse("ae"), Some(Method::Ae));
        assert_eq!(Method::parse(" proposed"), Some(Method::Proposed));
        assert_eq!(Method::parse("x"), None);
    }
}
