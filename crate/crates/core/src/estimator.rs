//! Static weighted-least-squares state estimation and the chi-square
//! bad-data detector.
//!
//! The operator knows the bus demands and the generator setpoints it issued,
//! so the measurement function is affine in the non-slack bus angles:
//!
//! * line flow: `base * b * (theta_from - theta_to)`
//! * generator output: the issued setpoint
//! * slack output: slack-bus injection from the angles, plus slack-bus demand,
//!   minus setpoints of generators on the slack bus
//! * bus angle: the angle itself (0 on the slack bus)

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::plant::GridModel;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("measurement redundancy too low: M={m} must exceed N={n}")]
    NotRedundant { m: usize, n: usize },
    #[error("weights must be positive and finite")]
    InvalidWeights,
    #[error("gain matrix is rank deficient (condition estimate {0:.3e})")]
    RankDeficient(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Condition-number ceiling for the gain matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Inputs the operator knows at each timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownInputs {
    /// Demand per bus, MW.
    pub bus_demand: Vec<f64>,
    /// Issued setpoint per generator, MW.
    pub setpoints: Vec<f64>,
}

/// `z = H x + c(known)`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    grid: GridModel,
    h: DMatrix<f64>,
}

impl MeasurementModel {
    pub fn new(grid: &GridModel) -> Self {
        let layout = grid.layout();
        let buses = grid.state_buses();
        let col_of = |bus: usize| buses.iter().position(|&b| b == bus);
        let base = grid.base_mva();
        let mut h = DMatrix::zeros(layout.len(), buses.len());
        for (i, l) in grid.lines().iter().enumerate() {
            if let Some(c) = col_of(l.from) {
                h[(layout.flow(i), c)] += base * l.susceptance;
            }
            if let Some(c) = col_of(l.to) {
                h[(layout.flow(i), c)] -= base * l.susceptance;
            }
        }
        let b_full = grid.bus_susceptance();
        let s = grid.slack_bus();
        for (c, &bus) in buses.iter().enumerate() {
            h[(layout.slack(), c)] = base * b_full[(s, bus)];
            h[(layout.angle(bus), c)] = 1.0;
        }
        Self { grid: grid.clone(), h }
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn grid(&self) -> &GridModel {
        &self.grid
    }

    /// Known-input term `c`.
    pub fn offset(&self, known: &KnownInputs) -> Vec<f64> {
        let layout = self.grid.layout();
        let mut c = vec![0.0; layout.len()];
        let s = self.grid.slack_bus();
        let mut slack = known.bus_demand[s];
        for (k, g) in self.grid.generators().iter().enumerate() {
            c[layout.gen(k)] = known.setpoints[k];
            if g.bus == s {
                slack -= known.setpoints[k];
            }
        }
        c[layout.slack()] = slack;
        c
    }

    /// `h(x)` for a state of non-slack angles.
    pub fn predict(&self, x: &[f64], known: &KnownInputs) -> Vec<f64> {
        let hx = &self.h * DVector::from_column_slice(x);
        hx.iter().zip(self.offset(known)).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Estimated non-slack angles.
    pub x_hat: Vec<f64>,
    /// `h(x_hat)`.
    pub z_hat: Vec<f64>,
    /// `z_hat - z`.
    pub residual: Vec<f64>,
    /// Weighted sum of squared residuals.
    pub ssr: f64,
}

/// WLS estimator with a cached factorization of `H^T W H`.
#[derive(Debug, Clone)]
pub struct WlsEstimator {
    model: MeasurementModel,
    weights: Vec<f64>,
    gain: Cholesky<f64, Dyn>,
}

impl WlsEstimator {
    pub fn new(grid: &GridModel, weights: &[f64]) -> Result<Self> {
        let model = MeasurementModel::new(grid);
        let (m, n) = model.h.shape();
        if m <= n {
            return Err(EstimatorError::NotRedundant { m, n });
        }
        if weights.len() != m {
            return Err(EstimatorError::ShapeMismatch { expected: m, found: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(EstimatorError::InvalidWeights);
        }
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
        let g = model.h.transpose() * &w * &model.h;
        let eig = g.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(EstimatorError::RankDeficient(cond));
        }
        let gain = g.cholesky().ok_or(EstimatorError::RankDeficient(cond))?;
        Ok(Self { model, weights: weights.to_vec(), gain })
    }

    pub fn model(&self) -> &MeasurementModel {
        &self.model
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Degrees of freedom of the residual, M - N.
    pub fn dof(&self) -> usize {
        let (m, n) = self.model.h.shape();
        m - n
    }

    pub fn estimate(&self, z: &[f64], known: &KnownInputs) -> Result<EstimationResult> {
        let m = self.weights.len();
        if z.len() != m {
            return Err(EstimatorError::ShapeMismatch { expected: m, found: z.len() });
        }
        let c = self.model.offset(known);
        let wz = DVector::from_iterator(m, (0..m).map(|i| self.weights[i] * (z[i] - c[i])));
        let x = self.gain.solve(&(self.model.h.transpose() * wz));
        let x_hat: Vec<f64> = x.iter().copied().collect();
        let z_hat = self.model.predict(&x_hat, known);
        let residual: Vec<f64> = z_hat.iter().zip(z).map(|(a, b)| a - b).collect();
        let ssr = residual.iter().zip(&self.weights).map(|(r, w)| w * r * r).sum();
        Ok(EstimationResult { x_hat, z_hat, residual, ssr })
    }
}

/// One-shot estimate; builds the estimator for the given weights.
pub fn estimate_state(grid: &GridModel, z: &[f64], known: &KnownInputs, weights: &[f64]) -> Result<EstimationResult> {
    WlsEstimator::new(grid, weights)?.estimate(z, known)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detection {
    Alarm,
    Quiet,
}

/// Alarm iff the weighted SSR exceeds the threshold.
pub fn chi_square_detect(result: &EstimationResult, threshold: f64) -> Detection {
    if result.ssr > threshold {
        Detection::Alarm
    } else {
        Detection::Quiet
    }
}

/// Upper quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_threshold(dof: usize, confidence: f64) -> f64 {
    ChiSquared::new(dof as f64).expect("positive dof").inverse_cdf(confidence)
}

/// Default alarm threshold: 99th percentile of chi-square with M - N dof.
pub fn default_threshold(estimator: &WlsEstimator) -> f64 {
    chi_square_threshold(estimator.dof(), 0.99)
}
