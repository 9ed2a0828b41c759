//! DC power-flow plant.
//!
//! A transmission grid is described by its buses, lines (susceptance in p.u.),
//! dispatchable generators and load buses. Bus 0 of the internal indexing is
//! bus `1` in files and channel names. A separate slack unit sits on the slack
//! bus and absorbs any mismatch between scheduled generation and demand; its
//! output is measured like any other generator.
//!
//! Measurement vectors are laid out as
//! `[flow per line | output per generator | slack | angle per bus]`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("demand {demand} MW exceeds dispatchable capacity {capacity} MW")]
    DemandExceedsCapacity { demand: f64, capacity: f64 },
    #[error("demand must be non-negative, got {0}")]
    NegativeDemand(f64),
    #[error("reduced susceptance matrix is singular (disconnected topology)")]
    SingularTopology,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("grid file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, PlantError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// 1/x in p.u.
    pub susceptance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub bus: usize,
    pub p_max: f64,
    #[serde(default)]
    pub p_min: f64,
    /// Marginal cost, $/MWh.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: usize,
    /// Base demand, MW.
    pub demand: f64,
}

/// Static grid description. Construct through [`GridModel::new`] so the
/// topology invariants hold.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    n_bus: usize,
    slack_bus: usize,
    base_mva: f64,
    slack_cap: f64,
    lines: Vec<Line>,
    generators: Vec<GeneratorSpec>,
    loads: Vec<LoadSpec>,
}

impl GridModel {
    /// Build a grid from zero-based bus indices.
    pub fn new(
        n_bus: usize,
        slack_bus: usize,
        base_mva: f64,
        lines: Vec<Line>,
        generators: Vec<GeneratorSpec>,
        loads: Vec<LoadSpec>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(PlantError::InvalidGrid(msg));
        if n_bus < 2 {
            return bad(format!("need at least 2 buses, got {n_bus}"));
        }
        if slack_bus >= n_bus {
            return bad(format!("slack bus {} out of range", slack_bus + 1));
        }
        if !(base_mva > 0.0) {
            return bad(format!("base MVA must be positive, got {base_mva}"));
        }
        for l in &lines {
            if l.from >= n_bus || l.to >= n_bus || l.from == l.to {
                return bad(format!("line {}-{} has invalid endpoints", l.from + 1, l.to + 1));
            }
            if !(l.susceptance > 0.0) {
                return bad(format!(
                    "line {}-{} susceptance must be positive",
                    l.from + 1,
                    l.to + 1
                ));
            }
        }
        for (k, g) in generators.iter().enumerate() {
            if g.bus >= n_bus {
                return bad(format!("generator {} on invalid bus", k + 1));
            }
            if !(g.p_min >= 0.0 && g.p_min <= g.p_max) {
                return bad(format!("generator {} violates 0 <= p_min <= p_max", k + 1));
            }
            if !(g.cost > 0.0) {
                return bad(format!("generator {} cost must be positive", k + 1));
            }
        }
        for l in &loads {
            if l.bus >= n_bus {
                return bad(format!("load on invalid bus {}", l.bus + 1));
            }
            if !(l.demand >= 0.0) {
                return bad(format!("load on bus {} has negative demand", l.bus + 1));
            }
        }
        if !is_connected(n_bus, &lines) {
            return bad("line graph is not connected".into());
        }
        Ok(Self {
            n_bus,
            slack_bus,
            base_mva,
            slack_cap: 0.0,
            lines,
            generators,
            loads,
        })
    }

    /// Extra demand the slack unit may cover beyond dispatchable capacity.
    pub fn with_slack_cap(mut self, cap: f64) -> Self {
        self.slack_cap = cap.max(0.0);
        self
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }
    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }
    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }
    pub fn slack_cap(&self) -> f64 {
        self.slack_cap
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn generators(&self) -> &[GeneratorSpec] {
        &self.generators
    }
    pub fn loads(&self) -> &[LoadSpec] {
        &self.loads
    }

    /// State dimension N: non-slack bus angles.
    pub fn state_dim(&self) -> usize {
        self.n_bus - 1
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout {
            n_lines: self.lines.len(),
            n_gen: self.generators.len(),
            n_bus: self.n_bus,
        }
    }

    pub fn capacity(&self) -> f64 {
        self.generators.iter().map(|g| g.p_max).sum()
    }

    pub fn base_demand(&self) -> f64 {
        self.loads.iter().map(|l| l.demand).sum()
    }

    /// Channel names, in measurement order.
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.layout().len());
        for l in &self.lines {
            names.push(format!("flow_{}_{}", l.from + 1, l.to + 1));
        }
        for k in 0..self.generators.len() {
            names.push(format!("gen_{}", k + 1));
        }
        names.push("slack".to_string());
        for b in 0..self.n_bus {
            names.push(format!("angle_{}", b + 1));
        }
        names
    }

    /// Non-slack bus indices, in state order.
    pub fn state_buses(&self) -> Vec<usize> {
        (0..self.n_bus).filter(|&b| b != self.slack_bus).collect()
    }

    /// Full bus susceptance matrix (p.u.).
    pub fn bus_susceptance(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_bus, self.n_bus);
        for l in &self.lines {
            b[(l.from, l.from)] += l.susceptance;
            b[(l.to, l.to)] += l.susceptance;
            b[(l.from, l.to)] -= l.susceptance;
            b[(l.to, l.from)] -= l.susceptance;
        }
        b
    }

    /// Lines incident to a bus.
    pub fn incident_lines(&self, bus: usize) -> Vec<usize> {
        self.lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.from == bus || l.to == bus)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: GridFile = toml::from_str(text).map_err(|e| PlantError::Parse(e.to_string()))?;
        file.into_model()
    }

    pub fn to_toml_string(&self) -> String {
        let file = GridFile::from_model(self);
        toml::to_string_pretty(&file).expect("grid file serializes")
    }
}

fn is_connected(n_bus: usize, lines: &[Line]) -> bool {
    let mut adj = vec![Vec::new(); n_bus];
    for l in lines {
        adj[l.from].push(l.to);
        adj[l.to].push(l.from);
    }
    let mut seen = vec![false; n_bus];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(b) = queue.pop_front() {
        for &n in &adj[b] {
            if !seen[n] {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// On-disk grid description; bus numbers are 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridFile {
    buses: BusTable,
    lines: Vec<Line>,
    generators: Vec<GeneratorSpec>,
    loads: Vec<LoadSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BusTable {
    count: usize,
    slack: usize,
    #[serde(default = "default_base_mva")]
    base_mva: f64,
    #[serde(default)]
    slack_cap: f64,
}

fn default_base_mva() -> f64 {
    100.0
}

impl GridFile {
    fn into_model(self) -> Result<GridModel> {
        let zero = |b: usize, what: &str| -> Result<usize> {
            if b == 0 {
                Err(PlantError::Parse(format!("{what}: bus numbers start at 1")))
            } else {
                Ok(b - 1)
            }
        };
        let lines = self
            .lines
            .iter()
            .map(|l| {
                Ok(Line {
                    from: zero(l.from, "line")?,
                    to: zero(l.to, "line")?,
                    susceptance: l.susceptance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let generators = self
            .generators
            .iter()
            .map(|g| Ok(GeneratorSpec { bus: zero(g.bus, "generator")?, ..*g }))
            .collect::<Result<Vec<_>>>()?;
        let loads = self
            .loads
            .iter()
            .map(|l| Ok(LoadSpec { bus: zero(l.bus, "load")?, ..*l }))
            .collect::<Result<Vec<_>>>()?;
        let slack = zero(self.buses.slack, "slack")?;
        Ok(GridModel::new(self.buses.count, slack, self.buses.base_mva, lines, generators, loads)?
            .with_slack_cap(self.buses.slack_cap))
    }

    fn from_model(g: &GridModel) -> Self {
        Self {
            buses: BusTable {
                count: g.n_bus,
                slack: g.slack_bus + 1,
                base_mva: g.base_mva,
                slack_cap: g.slack_cap,
            },
            lines: g
                .lines
                .iter()
                .map(|l| Line { from: l.from + 1, to: l.to + 1, ..*l })
                .collect(),
            generators: g.generators.iter().map(|x| GeneratorSpec { bus: x.bus + 1, ..*x }).collect(),
            loads: g.loads.iter().map(|x| LoadSpec { bus: x.bus + 1, ..*x }).collect(),
        }
    }
}

/// Canonical 6-bus grid: generators on buses 1-3 (bus 1 slack), loads on 4-6,
/// seven lines of 10 p.u.
pub fn build_default_grid() -> GridModel {
    let line = |a: usize, b: usize| Line { from: a - 1, to: b - 1, susceptance: 10.0 };
    let gen = |bus: usize, p_max: f64, cost: f64| GeneratorSpec { bus: bus - 1, p_max, p_min: 0.0, cost };
    GridModel::new(
        6,
        0,
        100.0,
        vec![line(1, 2), line(1, 4), line(2, 3), line(2, 5), line(3, 6), line(4, 5), line(5, 6)],
        vec![gen(1, 100.0, 10.0), gen(2, 80.0, 20.0), gen(3, 60.0, 30.0)],
        vec![
            LoadSpec { bus: 3, demand: 85.0 },
            LoadSpec { bus: 4, demand: 70.0 },
            LoadSpec { bus: 5, demand: 55.0 },
        ],
    )
    .expect("default grid is valid")
}

/// Index arithmetic over a measurement vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub n_lines: usize,
    pub n_gen: usize,
    pub n_bus: usize,
}

impl ChannelLayout {
    /// M = lines + generators + slack + buses.
    pub fn len(&self) -> usize {
        self.n_lines + self.n_gen + 1 + self.n_bus
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn flow(&self, line: usize) -> usize {
        line
    }
    pub fn gen(&self, k: usize) -> usize {
        self.n_lines + k
    }
    pub fn slack(&self) -> usize {
        self.n_lines + self.n_gen
    }
    pub fn angle(&self, bus: usize) -> usize {
        self.n_lines + self.n_gen + 1 + bus
    }
    pub fn flows<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[..self.n_lines]
    }
    pub fn gen_outputs<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.n_lines..self.n_lines + self.n_gen + 1]
    }
    pub fn angles<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.n_lines + self.n_gen + 1..]
    }
}

/// Merit-order dispatch: every unit starts at `p_min`, then units are raised
/// toward `p_max` in ascending cost order until demand is met.
pub fn dispatch(grid: &GridModel, demand_total: f64) -> Result<Vec<f64>> {
    if !(demand_total >= 0.0) {
        return Err(PlantError::NegativeDemand(demand_total));
    }
    let capacity = grid.capacity();
    if demand_total > capacity + grid.slack_cap {
        return Err(PlantError::DemandExceedsCapacity { demand: demand_total, capacity });
    }
    let mut u: Vec<f64> = grid.generators.iter().map(|g| g.p_min).collect();
    let mut remaining = demand_total - u.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| grid.generators[a].cost.total_cmp(&grid.generators[b].cost));
    for k in order {
        if remaining <= 0.0 {
            break;
        }
        let g = &grid.generators[k];
        let add = (g.p_max - u[k]).min(remaining);
        u[k] += add;
        remaining -= add;
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlow {
    /// Bus angles, rad; slack bus is 0.
    pub angles: Vec<f64>,
    /// Line flows from `from` to `to`, MW.
    pub flows: Vec<f64>,
}

/// Solve the DC power flow for net bus injections in MW. The slack injection
/// is overwritten with the negated sum of the others.
pub fn solve_power_flow(grid: &GridModel, injections: &[f64]) -> Result<PowerFlow> {
    if injections.len() != grid.n_bus {
        return Err(PlantError::LengthMismatch { expected: grid.n_bus, found: injections.len() });
    }
    let buses = grid.state_buses();
    let b_full = grid.bus_susceptance();
    let reduced = b_full.select_rows(&buses).select_columns(&buses);
    let rhs = DVector::from_iterator(buses.len(), buses.iter().map(|&b| injections[b] / grid.base_mva));
    let chol = reduced.cholesky().ok_or(PlantError::SingularTopology)?;
    let theta = chol.solve(&rhs);
    let mut angles = vec![0.0; grid.n_bus];
    for (i, &b) in buses.iter().enumerate() {
        angles[b] = theta[i];
    }
    let flows = line_flows(grid, &angles);
    Ok(PowerFlow { angles, flows })
}

pub fn line_flows(grid: &GridModel, angles: &[f64]) -> Vec<f64> {
    grid.lines
        .iter()
        .map(|l| grid.base_mva * l.susceptance * (angles[l.from] - angles[l.to]))
        .collect()
}

/// Physical operating point for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub flow: PowerFlow,
    /// Actual generator outputs, MW.
    pub gen_outputs: Vec<f64>,
    /// Slack output, MW.
    pub slack: f64,
    /// Demand per bus, MW.
    pub bus_demand: Vec<f64>,
}

impl OperatingPoint {
    /// Noiseless measurement vector.
    pub fn measurement(&self, layout: &ChannelLayout) -> Vec<f64> {
        let mut z = Vec::with_capacity(layout.len());
        z.extend_from_slice(&self.flow.flows);
        z.extend_from_slice(&self.gen_outputs);
        z.push(self.slack);
        z.extend_from_slice(&self.flow.angles);
        z
    }
}

/// Solve one timestep: generators produce `outputs`, loads draw `load_demand`
/// (one entry per load in grid order), the slack unit balances.
pub fn operate(grid: &GridModel, load_demand: &[f64], outputs: &[f64]) -> Result<OperatingPoint> {
    if load_demand.len() != grid.loads.len() {
        return Err(PlantError::LengthMismatch { expected: grid.loads.len(), found: load_demand.len() });
    }
    if outputs.len() != grid.generators.len() {
        return Err(PlantError::LengthMismatch { expected: grid.generators.len(), found: outputs.len() });
    }
    let mut bus_demand = vec![0.0; grid.n_bus];
    for (l, &d) in grid.loads.iter().zip(load_demand) {
        bus_demand[l.bus] += d;
    }
    let slack = bus_demand.iter().sum::<f64>() - outputs.iter().sum::<f64>();
    let mut injections: Vec<f64> = bus_demand.iter().map(|d| -d).collect();
    for (g, &p) in grid.generators.iter().zip(outputs) {
        injections[g.bus] += p;
    }
    injections[grid.slack_bus] += slack;
    let flow = solve_power_flow(grid, &injections)?;
    Ok(OperatingPoint { flow, gen_outputs: outputs.to_vec(), slack, bus_demand })
}

/// Per-load-bus demand series, time-major: `series[t][load]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    series: Vec<Vec<f64>>,
}

impl LoadProfile {
    pub fn new(series: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = series.first() {
            let width = first.len();
            for row in &series {
                if row.len() != width {
                    return Err(PlantError::LengthMismatch { expected: width, found: row.len() });
                }
                if let Some(&d) = row.iter().find(|d| !(**d >= 0.0)) {
                    return Err(PlantError::NegativeDemand(d));
                }
            }
        }
        Ok(Self { series })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }
    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
    pub fn at(&self, t: usize) -> &[f64] {
        &self.series[t]
    }
    pub fn total(&self, t: usize) -> f64 {
        self.series[t].iter().sum()
    }
    pub fn constant(demands: &[f64], hours: usize) -> Self {
        Self { series: vec![demands.to_vec(); hours] }
    }
}

/// Parameters of the synthetic daily load shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadShape {
    /// Relative amplitude of the daily sinusoid.
    pub amplitude: f64,
    /// Relative per-bus Gaussian jitter.
    pub jitter: f64,
    /// Hour of the daily peak.
    pub peak_hour: f64,
}

impl Default for LoadShape {
    fn default() -> Self {
        Self { amplitude: 0.07, jitter: 0.01, peak_hour: 18.0 }
    }
}

/// Hourly synthetic loads starting at `start_hour`: base demand scaled by a
/// daily sinusoid and multiplicative Gaussian jitter.
pub fn synthetic_loads(grid: &GridModel, hours: usize, start_hour: usize, shape: &LoadShape, seed: u64) -> LoadProfile {
    let mut rng = seed::stream(seed, "loads");
    let series = (0..hours)
        .map(|i| {
            let hour = (start_hour + i) as f64;
            let daily = 1.0 + shape.amplitude * (2.0 * PI * (hour - shape.peak_hour) / 24.0 + PI / 2.0).sin();
            grid.loads
                .iter()
                .map(|l| {
                    let eps: f64 = rng.sample(StandardNormal);
                    (l.demand * daily * (1.0 + shape.jitter * eps)).max(0.0)
                })
                .collect()
        })
        .collect();
    LoadProfile { series }
}

/// Generator setpoints, time-major: `setpoints[t][generator]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    setpoints: Vec<Vec<f64>>,
}

impl DispatchPlan {
    pub fn new(grid: &GridModel, setpoints: Vec<Vec<f64>>) -> Result<Self> {
        for row in &setpoints {
            if row.len() != grid.generators.len() {
                return Err(PlantError::LengthMismatch { expected: grid.generators.len(), found: row.len() });
            }
            for (g, &u) in grid.generators.iter().zip(row) {
                if u < g.p_min - 1e-9 || u > g.p_max + 1e-9 {
                    return Err(PlantError::InvalidGrid(format!(
                        "setpoint {u} outside [{}, {}]",
                        g.p_min, g.p_max
                    )));
                }
            }
        }
        Ok(Self { setpoints })
    }

    /// Merit-order plan following total demand hour by hour.
    pub fn merit_order(grid: &GridModel, loads: &LoadProfile) -> Result<Self> {
        let setpoints = (0..loads.len()).map(|t| dispatch(grid, loads.total(t))).collect::<Result<_>>()?;
        Ok(Self { setpoints })
    }

    pub fn len(&self) -> usize {
        self.setpoints.len()
    }
    pub fn is_empty(&self) -> bool {
        self.setpoints.is_empty()
    }
    pub fn at(&self, t: usize) -> &[f64] {
        &self.setpoints[t]
    }
}

/// Independent zero-mean Gaussian sensor noise, one σ per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub std: Vec<f64>,
}

/// Floor for power channels whose nominal value is near zero, MW.
pub const POWER_NOISE_FLOOR: f64 = 0.1;
/// Floor for angle channels, rad.
pub const ANGLE_NOISE_FLOOR: f64 = 1e-4;

impl NoiseModel {
    pub fn zero(layout: &ChannelLayout) -> Self {
        Self { std: vec![0.0; layout.len()] }
    }

    /// `fraction` of each channel's magnitude at the base-demand operating
    /// point, floored per channel kind.
    pub fn relative(grid: &GridModel, fraction: f64) -> Result<Self> {
        let demands: Vec<f64> = grid.loads.iter().map(|l| l.demand).collect();
        let u = dispatch(grid, grid.base_demand())?;
        let op = operate(grid, &demands, &u)?;
        let layout = grid.layout();
        let z = op.measurement(&layout);
        let std = z
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let floor = if i >= layout.angle(0) { ANGLE_NOISE_FLOOR } else { POWER_NOISE_FLOOR };
                (fraction * v.abs()).max(floor)
            })
            .collect();
        Ok(Self { std })
    }

    /// Default: 1% of nominal magnitude.
    pub fn default_for(grid: &GridModel) -> Result<Self> {
        Self::relative(grid, 0.01)
    }

    /// Noise draws, `[t][channel]`, from a seeded stream.
    pub fn draw(&self, hours: usize, seed: u64, tag: &str) -> Vec<Vec<f64>> {
        let mut rng = seed::stream(seed, tag);
        (0..hours)
            .map(|_| {
                self.std
                    .iter()
                    .map(|s| {
                        let e: f64 = rng.sample(StandardNormal);
                        s * e
                    })
                    .collect()
            })
            .collect()
    }

    /// Weights 1/σ² for estimation.
    pub fn weights(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / (s * s)).collect()
    }
}

/// One timestep of sensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub t: usize,
    /// `[flows | generator outputs | slack | angles]`.
    pub z: Vec<f64>,
    pub label: usize,
}

/// Honest sensor stream for a load/dispatch history. Labels are all 0.
pub fn simulate(
    grid: &GridModel,
    loads: &LoadProfile,
    plan: &DispatchPlan,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<MeasurementFrame>> {
    if loads.len() != plan.len() {
        return Err(PlantError::LengthMismatch { expected: loads.len(), found: plan.len() });
    }
    let layout = grid.layout();
    let draws = noise.draw(loads.len(), seed, "sensor-noise");
    (0..loads.len())
        .map(|t| {
            let op = operate(grid, loads.at(t), plan.at(t))?;
            let mut z = op.measurement(&layout);
            for (v, e) in z.iter_mut().zip(&draws[t]) {
                *v += e;
            }
            Ok(MeasurementFrame { t, z, label: 0 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> GridModel {
        GridModel::new(
            2,
            0,
            1.0,
            vec![Line { from: 0, to: 1, susceptance: 10.0 }],
            vec![GeneratorSpec { bus: 0, p_max: 10.0, p_min: 0.0, cost: 1.0 }],
            vec![LoadSpec { bus: 1, demand: 5.0 }],
        )
        .unwrap()
    }

    /// Gaussian elimination with partial pivoting on the full B matrix, slack
    /// row replaced by `theta_slack = 0`.
    fn oracle_angles(grid: &GridModel, injections: &[f64]) -> Vec<f64> {
        let n = grid.n_bus();
        let b = grid.bus_susceptance();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| b[(i, j)]).collect();
                row.push(injections[i] / grid.base_mva());
                row
            })
            .collect();
        let s = grid.slack_bus();
        a[s] = vec![0.0; n + 1];
        a[s][s] = 1.0;
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn default_grid_dimensions() {
        let g = build_default_grid();
        assert_eq!(g.n_bus(), 6);
        assert_eq!(g.lines().len(), 7);
        assert_eq!(g.generators().len(), 3);
        assert_eq!(g.layout().len(), 17);
        assert_eq!(g.state_dim(), 5);
        assert_eq!(g.channel_names()[0], "flow_1_2");
        assert_eq!(g.channel_names()[10], "slack");
    }

    #[test]
    fn merit_order_dispatch() {
        let g = build_default_grid();
        assert_eq!(dispatch(&g, 150.0).unwrap(), vec![100.0, 50.0, 0.0]);
        assert_eq!(dispatch(&g, 0.0).unwrap(), vec![0.0, 0.0, 0.0]);
        assert!(matches!(dispatch(&g, 250.0), Err(PlantError::DemandExceedsCapacity { .. })));
        assert!(matches!(dispatch(&g, -1.0), Err(PlantError::NegativeDemand(_))));
    }

    #[test]
    fn slack_cap_extends_capacity() {
        let g = build_default_grid().with_slack_cap(20.0);
        assert_eq!(dispatch(&g, 250.0).unwrap(), vec![100.0, 80.0, 60.0]);
    }

    #[test]
    fn zero_injection_flow() {
        let g = build_default_grid();
        let pf = solve_power_flow(&g, &[0.0; 6]).unwrap();
        assert!(pf.angles.iter().all(|a| *a == 0.0));
        assert!(pf.flows.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn two_bus_toy() {
        let pf = solve_power_flow(&two_bus(), &[5.0, -5.0]).unwrap();
        assert!((pf.angles[0]).abs() < 1e-12);
        assert!((pf.angles[1] + 0.5).abs() < 1e-12);
        assert!((pf.flows[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn default_grid_matches_elimination_oracle() {
        let g = build_default_grid();
        let u = dispatch(&g, 150.0).unwrap();
        let demands = [60.0, 50.0, 40.0];
        let op = operate(&g, &demands, &u).unwrap();
        let mut inj = vec![0.0; 6];
        inj[0] = 100.0;
        inj[1] = 50.0;
        inj[3] = -60.0;
        inj[4] = -50.0;
        inj[5] = -40.0;
        let expect = oracle_angles(&g, &inj);
        for (a, e) in op.flow.angles.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-9);
        }
        let expect_flows = line_flows(&g, &expect);
        for (f, e) in op.flow.flows.iter().zip(&expect_flows) {
            assert!((f - e).abs() < 1e-9);
        }
        // nodal balance
        for bus in 0..6 {
            let out: f64 = g
                .lines()
                .iter()
                .zip(&op.flow.flows)
                .map(|(l, f)| if l.from == bus { *f } else if l.to == bus { -*f } else { 0.0 })
                .sum();
            assert!((out - inj[bus]).abs() < 1e-9, "bus {bus}");
        }
    }

    #[test]
    fn disconnected_grid_rejected() {
        let err = GridModel::new(
            3,
            0,
            100.0,
            vec![Line { from: 0, to: 1, susceptance: 1.0 }],
            vec![],
            vec![],
        );
        assert!(matches!(err, Err(PlantError::InvalidGrid(_))));
    }

    #[test]
    fn invalid_generator_rejected() {
        let err = GridModel::new(
            2,
            0,
            100.0,
            vec![Line { from: 0, to: 1, susceptance: 1.0 }],
            vec![GeneratorSpec { bus: 0, p_max: 1.0, p_min: 2.0, cost: 1.0 }],
            vec![],
        );
        assert!(err.is_err());
        let err = GridModel::new(
            2,
            0,
            100.0,
            vec![Line { from: 0, to: 1, susceptance: -1.0 }],
            vec![],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn toml_round_trip() {
        let g = build_default_grid();
        let text = g.to_toml_string();
        assert!(text.contains("[buses]"));
        assert!(text.contains("[[lines]]"));
        assert_eq!(GridModel::from_toml_str(&text).unwrap(), g);
    }

    #[test]
    fn empty_and_constant_series() {
        let g = build_default_grid();
        let noise = NoiseModel::zero(&g.layout());
        let loads = LoadProfile::constant(&[85.0, 70.0, 55.0], 0);
        let plan = DispatchPlan::merit_order(&g, &loads).unwrap();
        assert!(simulate(&g, &loads, &plan, &noise, 1).unwrap().is_empty());

        let loads = LoadProfile::constant(&[85.0, 70.0, 55.0], 5);
        let plan = DispatchPlan::merit_order(&g, &loads).unwrap();
        let frames = simulate(&g, &loads, &plan, &noise, 1).unwrap();
        assert!(frames.windows(2).all(|w| w[0].z == w[1].z));
        assert!(frames.iter().all(|f| f.label == 0));
    }

    #[test]
    fn seeded_noise_is_bitwise_reproducible() {
        let g = build_default_grid();
        let noise = NoiseModel::default_for(&g).unwrap();
        let loads = synthetic_loads(&g, 48, 0, &LoadShape::default(), 9);
        let plan = DispatchPlan::merit_order(&g, &loads).unwrap();
        let a = simulate(&g, &loads, &plan, &noise, 11).unwrap();
        let b = simulate(&g, &loads, &plan, &noise, 11).unwrap();
        let bits = |f: &[MeasurementFrame]| f.iter().flat_map(|x| x.z.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = simulate(&g, &loads, &plan, &noise, 12).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn power_balance_noiseless() {
        let g = build_default_grid();
        let loads = synthetic_loads(&g, 72, 5, &LoadShape::default(), 3);
        let plan = DispatchPlan::merit_order(&g, &loads).unwrap();
        for t in 0..loads.len() {
            let op = operate(&g, loads.at(t), plan.at(t)).unwrap();
            let gen: f64 = op.gen_outputs.iter().sum::<f64>() + op.slack;
            assert!((gen - loads.total(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_loads_stay_dispatchable() {
        let g = build_default_grid();
        let loads = synthetic_loads(&g, 24 * 60, 0, &LoadShape::default(), 4);
        assert!(DispatchPlan::merit_order(&g, &loads).is_ok());
    }
}
