//! Central finite-difference gradient verification.

use super::{Parameterized, Tensor};

/// Perturbation size for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor: gradients smaller than this in magnitude are compared
/// in absolute terms.
pub const FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a| + |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

/// Worst relative error per parameter block, comparing `analytic` against
/// central differences of `loss`. Parameters are restored afterwards.
pub fn block_errors<M, F>(model: &mut M, analytic: &[Tensor], loss: F) -> Vec<f64>
where
    M: Parameterized,
    F: Fn(&M) -> f64,
{
    let n_blocks = model.params().len();
    assert_eq!(n_blocks, analytic.len(), "one gradient block per parameter block");
    let mut worst = vec![0.0f64; n_blocks];
    for b in 0..n_blocks {
        let len = model.params()[b].len();
        for i in 0..len {
            let orig = model.params()[b].data()[i];
            model.params_mut()[b].data_mut()[i] = orig + STEP;
            let up = loss(model);
            model.params_mut()[b].data_mut()[i] = orig - STEP;
            let down = loss(model);
            model.params_mut()[b].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst[b] = worst[b].max(relative_error(analytic[b].data()[i], numeric));
        }
    }
    worst
}

pub fn max_relative_error<M, F>(model: &mut M, analytic: &[Tensor], loss: F) -> f64
where
    M: Parameterized,
    F: Fn(&M) -> f64,
{
    block_errors(model, analytic, loss).into_iter().fold(0.0, f64::max)
}
