//! One-step-ahead LSTM predictor over latent embeddings.
//!
//! ```text
//! f = sigmoid(W_f s + U_f h + b_f)      i = sigmoid(W_i s + U_i h + b_i)
//! o = sigmoid(W_o s + U_o h + b_o)      c' = tanh(W_c s + U_c h + b_c)
//! c_t = f * c_{t-1} + i * c'            h_t = o * tanh(c_t)
//! prediction = W_d r,  r = h_t (default) or o_t
//! ```

use serde::{Deserialize, Serialize};

use super::{dot, glorot, sigmoid, NeuralError, Parameterized, Result, Tensor};
use crate::seed::Rng;

/// What the dense readout sees at the last step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Hidden,
    OutputGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub window: usize,
    #[serde(default)]
    pub readout: Readout,
}

impl LstmConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, hidden: 32, window: 12, readout: Readout::Hidden }
    }
}

/// Gate order in parameter blocks: forget, input, output, cell.
const GATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub config: LstmConfig,
    /// `[f, i, o, c]`, each `[hidden, input]`.
    pub w: [Tensor; GATES],
    /// `[f, i, o, c]`, each `[hidden, hidden]`.
    pub u: [Tensor; GATES],
    /// `[f, i, o, c]`, each `[hidden]`.
    pub b: [Tensor; GATES],
    /// `[input, hidden]`.
    pub w_d: Tensor,
}

/// Intermediate values of one step.
#[derive(Debug, Clone)]
pub struct StepCache {
    s: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Unroll {
    steps: Vec<StepCache>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl Lstm {
    /// Glorot weights, zero biases except the forget gate at +1.
    pub fn new(config: LstmConfig, rng: &mut Rng) -> Self {
        let (n, h) = (config.input_dim, config.hidden);
        let w = std::array::from_fn(|_| glorot(h, n, rng));
        let u = std::array::from_fn(|_| glorot(h, h, rng));
        let mut b: [Tensor; GATES] = std::array::from_fn(|_| Tensor::zeros(&[h]));
        b[0].fill(1.0);
        let w_d = glorot(n, h, rng);
        Self { config, w, u, b, w_d }
    }

    /// All-zero parameters.
    pub fn zeros(config: LstmConfig) -> Self {
        let (n, h) = (config.input_dim, config.hidden);
        Self {
            config,
            w: std::array::from_fn(|_| Tensor::zeros(&[h, n])),
            u: std::array::from_fn(|_| Tensor::zeros(&[h, h])),
            b: std::array::from_fn(|_| Tensor::zeros(&[h])),
            w_d: Tensor::zeros(&[n, h]),
        }
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    fn step_cached(&self, s: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<StepCache> {
        let (n, hd) = (self.config.input_dim, self.config.hidden);
        if s.len() != n || h_prev.len() != hd || c_prev.len() != hd {
            return Err(NeuralError::ShapeMismatch {
                expected: vec![n, hd, hd],
                found: vec![s.len(), h_prev.len(), c_prev.len()],
            });
        }
        let pre = |gate: usize, j: usize| {
            self.b[gate].data()[j]
                + dot(&self.w[gate].data()[j * n..(j + 1) * n], s)
                + dot(&self.u[gate].data()[j * hd..(j + 1) * hd], h_prev)
        };
        let f: Vec<f64> = (0..hd).map(|j| sigmoid(pre(0, j))).collect();
        let i: Vec<f64> = (0..hd).map(|j| sigmoid(pre(1, j))).collect();
        let o: Vec<f64> = (0..hd).map(|j| sigmoid(pre(2, j))).collect();
        let g: Vec<f64> = (0..hd).map(|j| pre(3, j).tanh()).collect();
        let c: Vec<f64> = (0..hd).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let tanh_c = c.iter().map(|v| v.tanh()).collect();
        Ok(StepCache { s: s.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), f, i, o, g, tanh_c })
    }

    /// One cell update; returns `(h_t, c_t)`.
    pub fn step(&self, s: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let st = self.step_cached(s, h_prev, c_prev)?;
        Ok((hidden_of(&st), cell_of(&st)))
    }

    fn readout_input<'a>(&self, last: &'a StepCache, h: &'a [f64]) -> &'a [f64] {
        match self.config.readout {
            Readout::Hidden => h,
            Readout::OutputGate => &last.o,
        }
    }

    pub fn readout(&self, r: &[f64]) -> Vec<f64> {
        let hd = self.config.hidden;
        (0..self.config.input_dim).map(|k| dot(&self.w_d.data()[k * hd..(k + 1) * hd], r)).collect()
    }

    /// Roll the cell over `window` from zero state and read out a prediction.
    pub fn unroll(&self, window: &[Vec<f64>]) -> Result<Unroll> {
        if window.len() != self.config.window {
            return Err(NeuralError::WindowLength { expected: self.config.window, found: window.len() });
        }
        let hd = self.config.hidden;
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut steps = Vec::with_capacity(window.len());
        for s in window {
            let st = self.step_cached(s, &h, &c)?;
            h = hidden_of(&st);
            c = cell_of(&st);
            steps.push(st);
        }
        let prediction = self.readout(self.readout_input(steps.last().expect("window > 0"), &h));
        Ok(Unroll { steps, h, c, prediction })
    }

    /// Predicted next embedding.
    pub fn predict(&self, window: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.unroll(window)?.prediction)
    }

    /// Backpropagation through time for `d_pred` (gradient wrt the
    /// prediction), accumulated into `grads` in `params()` order.
    pub fn backward(&self, unroll: &Unroll, d_pred: &[f64], grads: &mut [Tensor]) {
        let (n, hd) = (self.config.input_dim, self.config.hidden);
        let last = unroll.steps.last().expect("non-empty unroll");
        let r = self.readout_input(last, &unroll.h).to_vec();
        let gd = &mut grads[3 * GATES];
        let mut dr = vec![0.0; hd];
        for k in 0..n {
            for j in 0..hd {
                gd.data_mut()[k * hd + j] += d_pred[k] * r[j];
                dr[j] += d_pred[k] * self.w_d.data()[k * hd + j];
            }
        }
        let (mut dh, mut d_o_extra) = match self.config.readout {
            Readout::Hidden => (dr, vec![0.0; hd]),
            Readout::OutputGate => (vec![0.0; hd], dr),
        };
        let mut dc = vec![0.0; hd];
        for st in unroll.steps.iter().rev() {
            let mut da = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];
            for j in 0..hd {
                let d_o = dh[j] * st.tanh_c[j] + d_o_extra[j];
                let dct = dc[j] + dh[j] * st.o[j] * (1.0 - st.tanh_c[j] * st.tanh_c[j]);
                let d_f = dct * st.c_prev[j];
                let d_i = dct * st.g[j];
                let d_g = dct * st.i[j];
                dc[j] = dct * st.f[j];
                da[0][j] = d_f * st.f[j] * (1.0 - st.f[j]);
                da[1][j] = d_i * st.i[j] * (1.0 - st.i[j]);
                da[2][j] = d_o * st.o[j] * (1.0 - st.o[j]);
                da[3][j] = d_g * (1.0 - st.g[j] * st.g[j]);
            }
            let mut dh_prev = vec![0.0; hd];
            for gate in 0..GATES {
                let (gw, rest) = grads.split_at_mut(GATES);
                let (gu, gb) = rest.split_at_mut(GATES);
                let u = self.u[gate].data();
                for j in 0..hd {
                    let a = da[gate][j];
                    if a == 0.0 {
                        continue;
                    }
                    gb[gate].data_mut()[j] += a;
                    let wrow = &mut gw[gate].data_mut()[j * n..(j + 1) * n];
                    for (w, s) in wrow.iter_mut().zip(&st.s) {
                        *w += a * s;
                    }
                    let urow = &mut gu[gate].data_mut()[j * hd..(j + 1) * hd];
                    for (k, w) in urow.iter_mut().enumerate() {
                        *w += a * st.h_prev[k];
                        dh_prev[k] += a * u[j * hd + k];
                    }
                }
            }
            dh = dh_prev;
            d_o_extra = vec![0.0; hd];
        }
    }
}

fn cell_of(st: &StepCache) -> Vec<f64> {
    (0..st.f.len()).map(|j| st.f[j] * st.c_prev[j] + st.i[j] * st.g[j]).collect()
}

fn hidden_of(st: &StepCache) -> Vec<f64> {
    st.o.iter().zip(&st.tanh_c).map(|(o, t)| o * t).collect()
}

impl Parameterized for Lstm {
    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.w.iter().collect();
        p.extend(self.u.iter());
        p.extend(self.b.iter());
        p.push(&self.w_d);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.w.iter_mut().collect();
        p.extend(self.u.iter_mut());
        p.extend(self.b.iter_mut());
        p.push(&mut self.w_d);
        p
    }
}

/// Mean squared error over embedding dimensions.
pub fn prediction_mse(prediction: &[f64], target: &[f64]) -> f64 {
    prediction.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64
}

/// Loss and its gradient wrt the prediction.
pub fn prediction_loss_grad(prediction: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = target.len() as f64;
    let d = prediction.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    (prediction_mse(prediction, target), d)
}
