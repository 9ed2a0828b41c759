//! Fault and covert-attack injection, and labeled dataset assembly.
//!
//! Both conditions cut the target generator's output to `(1 - severity) * u`
//! inside the scenario window, with the slack unit making up the difference.
//! A fault leaves every sensor honest. A covert attacker additionally
//! overwrites the sensors it controls around the target with what its own
//! copy of the grid predicts for the original setpoint.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::KnownInputs;
use crate::plant::{
    operate, synthetic_loads, DispatchPlan, GridModel, LoadProfile, LoadShape, MeasurementFrame, NoiseModel,
    PlantError,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum ThreatError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("attacker model disagrees with grid: {0}")]
    MaskMismatch(String),
    #[error("scenario list is empty")]
    NoScenarios,
    #[error(transparent)]
    Plant(#[from] PlantError),
}

pub type Result<T> = std::result::Result<T, ThreatError>;

/// Severity grid; index `i` is level `i + 1`.
pub const SEVERITIES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Normal,
    Fault,
    Covert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Zero-based generator index; absent for normal operation.
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default)]
    pub severity: f64,
    /// Half-open `[start, end)`; `None` covers the whole episode.
    #[serde(default)]
    pub window: Option<(usize, usize)>,
}

impl Scenario {
    pub fn normal() -> Self {
        Self { kind: ScenarioKind::Normal, target: None, severity: 0.0, window: None }
    }

    pub fn fault(target: usize, severity: f64) -> Self {
        Self { kind: ScenarioKind::Fault, target: Some(target), severity, window: None }
    }

    pub fn covert(target: usize, severity: f64) -> Self {
        Self { kind: ScenarioKind::Covert, target: Some(target), severity, window: None }
    }

    pub fn with_window(mut self, start: usize, end: usize) -> Self {
        self.window = Some((start, end));
        self
    }

    /// Class id of frames inside the window: 0 for normal, `target + 1` otherwise.
    pub fn class(&self) -> usize {
        match (self.kind, self.target) {
            (ScenarioKind::Normal, _) | (_, None) => 0,
            (_, Some(k)) => k + 1,
        }
    }

    pub fn window_range(&self, len: usize) -> Range<usize> {
        match self.window {
            Some((a, b)) => a..b,
            None => 0..len,
        }
    }

    pub fn validate(&self, grid: &GridModel, len: usize) -> Result<()> {
        let bad = |m: String| Err(ThreatError::InvalidScenario(m));
        if let Some((a, b)) = self.window {
            if a > b || b > len {
                return bad(format!("window [{a}, {b}) outside episode of length {len}"));
            }
        }
        match self.kind {
            ScenarioKind::Normal => Ok(()),
            ScenarioKind::Fault | ScenarioKind::Covert => {
                let Some(k) = self.target else {
                    return bad("fault/covert scenario needs a target generator".into());
                };
                if k >= grid.generators().len() {
                    return bad(format!("target generator {} does not exist", k + 1));
                }
                if !(self.severity > 0.0 && self.severity <= 0.5) {
                    return bad(format!("severity {} outside (0, 0.5]", self.severity));
                }
                Ok(())
            }
        }
    }
}

/// Channels the attacker controls around one generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorMask {
    channels: Vec<usize>,
}

impl SensorMask {
    /// Generator output, flows on lines incident to its bus, and its bus angle.
    pub fn for_target(grid: &GridModel, target: usize) -> Self {
        let layout = grid.layout();
        let bus = grid.generators()[target].bus;
        let mut channels = vec![layout.gen(target), layout.angle(bus)];
        channels.extend(grid.incident_lines(bus).into_iter().map(|l| layout.flow(l)));
        channels.sort_unstable();
        channels.dedup();
        Self { channels }
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn contains(&self, channel: usize) -> bool {
        self.channels.binary_search(&channel).is_ok()
    }
}

/// Everything needed to replay one episode: loads, issued setpoints, sensor
/// noise and the episode seed.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    pub loads: LoadProfile,
    pub plan: DispatchPlan,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl EpisodeInputs {
    /// Synthetic loads with a merit-order plan.
    pub fn synthetic(grid: &GridModel, hours: usize, start_hour: usize, shape: &LoadShape, noise: NoiseModel, seed: u64) -> Result<Self> {
        let loads = synthetic_loads(grid, hours, start_hour, shape, seed);
        let plan = DispatchPlan::merit_order(grid, &loads)?;
        Ok(Self { loads, plan, noise, seed })
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }
}

/// Labeled frames plus what the operator knew at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<MeasurementFrame>,
    pub known: Vec<KnownInputs>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn known_inputs(grid: &GridModel, inputs: &EpisodeInputs, t: usize) -> KnownInputs {
    let mut bus_demand = vec![0.0; grid.n_bus()];
    for (l, d) in grid.loads().iter().zip(inputs.loads.at(t)) {
        bus_demand[l.bus] += d;
    }
    KnownInputs { bus_demand, setpoints: inputs.plan.at(t).to_vec() }
}

/// Shared driver: `outputs(t)` gives actual generator outputs, `overwrite`
/// may rewrite the noisy measurement vector.
fn run<F, G>(grid: &GridModel, inputs: &EpisodeInputs, scenario: &Scenario, mut outputs: F, mut overwrite: G) -> Result<Episode>
where
    F: FnMut(usize, &[f64]) -> Vec<f64>,
    G: FnMut(usize, &mut Vec<f64>) -> Result<()>,
{
    if inputs.loads.len() != inputs.plan.len() {
        return Err(PlantError::LengthMismatch { expected: inputs.loads.len(), found: inputs.plan.len() }.into());
    }
    let layout = grid.layout();
    let window = scenario.window_range(inputs.len());
    let draws = inputs.noise.draw(inputs.len(), inputs.seed, "sensor-noise");
    let mut frames = Vec::with_capacity(inputs.len());
    let mut known = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let u = inputs.plan.at(t);
        let actual = outputs(t, u);
        let op = operate(grid, inputs.loads.at(t), &actual)?;
        let mut z = op.measurement(&layout);
        for (v, e) in z.iter_mut().zip(&draws[t]) {
            *v += e;
        }
        overwrite(t, &mut z)?;
        let label = if window.contains(&t) { scenario.class() } else { 0 };
        frames.push(MeasurementFrame { t, z, label });
        known.push(known_inputs(grid, inputs, t));
    }
    Ok(Episode { frames, known })
}

fn reduced_outputs(scenario: &Scenario, window: Range<usize>) -> impl FnMut(usize, &[f64]) -> Vec<f64> {
    let target = scenario.target;
    let keep = 1.0 - scenario.severity;
    move |t, u| {
        let mut out = u.to_vec();
        if let Some(k) = target {
            if window.contains(&t) {
                out[k] *= keep;
            }
        }
        out
    }
}

/// Honest episode.
pub fn normal_episode(grid: &GridModel, inputs: &EpisodeInputs) -> Result<Episode> {
    run(grid, inputs, &Scenario::normal(), |_, u| u.to_vec(), |_, _| Ok(()))
}

/// Generation loss with honest sensors.
pub fn apply_fault(grid: &GridModel, inputs: &EpisodeInputs, scenario: &Scenario) -> Result<Episode> {
    if scenario.kind != ScenarioKind::Fault {
        return Err(ThreatError::InvalidScenario("expected a fault scenario".into()));
    }
    scenario.validate(grid, inputs.len())?;
    let window = scenario.window_range(inputs.len());
    run(grid, inputs, scenario, reduced_outputs(scenario, window), |_, _| Ok(()))
}

fn check_attacker_model(grid: &GridModel, attacker: &GridModel) -> Result<()> {
    let mismatch = |m: &str| Err(ThreatError::MaskMismatch(m.to_string()));
    if attacker.n_bus() != grid.n_bus() || attacker.slack_bus() != grid.slack_bus() {
        return mismatch("bus count or slack bus differs");
    }
    if attacker.lines().len() != grid.lines().len()
        || attacker.lines().iter().zip(grid.lines()).any(|(a, b)| a.from != b.from || a.to != b.to)
    {
        return mismatch("line endpoints differ");
    }
    if attacker.generators().len() != grid.generators().len()
        || attacker.generators().iter().zip(grid.generators()).any(|(a, b)| a.bus != b.bus)
    {
        return mismatch("generator placement differs");
    }
    if attacker.loads().len() != grid.loads().len()
        || attacker.loads().iter().zip(grid.loads()).any(|(a, b)| a.bus != b.bus)
    {
        return mismatch("load placement differs");
    }
    Ok(())
}

/// Covert attack: cut generation in the window, then overwrite the masked
/// channels with the attacker's simulation of the unattacked grid plus
/// attacker-side noise of the same σ.
pub fn apply_covert_attack(grid: &GridModel, inputs: &EpisodeInputs, scenario: &Scenario, attacker_model: &GridModel) -> Result<Episode> {
    if scenario.kind != ScenarioKind::Covert {
        return Err(ThreatError::InvalidScenario("expected a covert scenario".into()));
    }
    scenario.validate(grid, inputs.len())?;
    check_attacker_model(grid, attacker_model)?;
    let target = scenario.target.expect("validated");
    let mask = SensorMask::for_target(grid, target);
    let window = scenario.window_range(inputs.len());
    let attacker_noise = inputs.noise.draw(inputs.len(), inputs.seed, "attacker-noise");
    let layout = attacker_model.layout();
    let w = window.clone();
    run(grid, inputs, scenario, reduced_outputs(scenario, window), |t, z| {
        if w.contains(&t) {
            let expected = operate(attacker_model, inputs.loads.at(t), inputs.plan.at(t))?.measurement(&layout);
            for &c in mask.channels() {
                z[c] = expected[c] + attacker_noise[t][c];
            }
        }
        Ok(())
    })
}

/// Dispatch on scenario kind; covert attacks use an exact copy of the grid.
pub fn run_scenario(grid: &GridModel, inputs: &EpisodeInputs, scenario: &Scenario) -> Result<Episode> {
    match scenario.kind {
        ScenarioKind::Normal => normal_episode(grid, inputs),
        ScenarioKind::Fault => apply_fault(grid, inputs, scenario),
        ScenarioKind::Covert => apply_covert_attack(grid, inputs, scenario, grid),
    }
}

/// How episodes are generated for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub hours: usize,
    pub shape: LoadShape,
    /// Relative sensor noise.
    pub noise_fraction: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { hours: 240, shape: LoadShape::default(), noise_fraction: 0.01 }
    }
}

/// Concatenated labeled episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channel_names: Vec<String>,
    pub frames: Vec<MeasurementFrame>,
    pub known: Vec<KnownInputs>,
    /// Frame ranges of each episode, in order.
    pub episodes: Vec<Range<usize>>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn empty(grid: &GridModel) -> Self {
        Self {
            channel_names: grid.channel_names(),
            frames: Vec::new(),
            known: Vec::new(),
            episodes: Vec::new(),
            n_classes: grid.generators().len() + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push_episode(&mut self, episode: Episode) {
        let start = self.frames.len();
        self.frames.extend(episode.frames);
        self.known.extend(episode.known);
        self.episodes.push(start..self.frames.len());
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for f in &self.frames {
            counts[f.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn append(&mut self, other: Dataset) {
        let offset = self.frames.len();
        self.frames.extend(other.frames);
        self.known.extend(other.known);
        self.episodes.extend(other.episodes.into_iter().map(|r| r.start + offset..r.end + offset));
    }
}

/// Generate `episodes_per_scenario` episodes of every scenario. Episode `e`
/// of scenario `s` draws loads and noise from `(seed, "episode/s/e")` and
/// starts at a random hour of day.
pub fn build_dataset(grid: &GridModel, scenarios: &[Scenario], episodes_per_scenario: usize, config: &EpisodeConfig, seed: u64) -> Result<Dataset> {
    if scenarios.is_empty() {
        return Err(ThreatError::NoScenarios);
    }
    let noise = NoiseModel::relative(grid, config.noise_fraction)?;
    let mut data = Dataset::empty(grid);
    for (s, scenario) in scenarios.iter().enumerate() {
        scenario.validate(grid, config.hours)?;
        for e in 0..episodes_per_scenario {
            let ep_seed = seed::derive_seed(seed, &format!("episode/{s}/{e}"));
            let start_hour = seed::stream(ep_seed, "start-hour").random_range(0..24);
            let inputs = EpisodeInputs::synthetic(grid, config.hours, start_hour, &config.shape, noise.clone(), ep_seed)?;
            data.push_episode(run_scenario(grid, &inputs, scenario)?);
        }
    }
    Ok(data)
}

/// Covert attack on every generator at one severity, whole-episode windows.
pub fn covert_scenarios(grid: &GridModel, severity: f64) -> Vec<Scenario> {
    (0..grid.generators().len()).map(|k| Scenario::covert(k, severity)).collect()
}
