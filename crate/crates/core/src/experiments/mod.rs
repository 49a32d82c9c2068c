//! Monte Carlo harness: metrics, baselines, sweeps and image experiments.

mod image;
mod sweep;

use crate::em::mmse_given_q;
use crate::error::{MpemError, Result};
use crate::hmt::HmtParams;
use crate::sensing::{SensingOperator, Transform};

pub use image::{run_image, synth_image, ImageKind, ImageOutcome, ImageSpec};
pub use sweep::{
    aggregate, aggregate_csv, build_operator, results_csv, run_sweep, run_trial, AggregateRow,
    MatrixKind, TrialResult, TrialSpec,
};

/// `||estimate - truth||^2 / ||truth||^2`.
pub fn nmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(MpemError::Dimension(format!(
            "estimate length {} differs from truth length {}",
            estimate.len(),
            truth.len()
        )));
    }
    let energy: f64 = truth.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(MpemError::ZeroSignal);
    }
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / energy)
}

/// `10 log10(range(Psi s)^2 / (||estimate - truth||^2 / p))`, with the
/// range taken over the signal-domain truth.
pub fn psnr_db(estimate: &[f64], truth: &[f64], psi: &Transform) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(MpemError::Dimension(format!(
            "estimate length {} differs from truth length {}",
            estimate.len(),
            truth.len()
        )));
    }
    let x = psi.synthesize(truth);
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(MpemError::Range("signal has zero dynamic range".into()));
    }
    let err: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Err(MpemError::InfiniteValue);
    }
    let mse = err / truth.len() as f64;
    Ok(10.0 * (range * range / mse).log10())
}

/// MMSE estimate under the true states.
pub fn genie_baseline(
    q_true: &[bool],
    op: &dyn SensingOperator,
    y: &[f64],
    params: &HmtParams,
) -> Result<Vec<f64>> {
    mmse_given_q(q_true, op, y, params)
}

/// MMSE estimate with every state high, which ignores sparsity.
pub fn all_high_baseline(
    op: &dyn SensingOperator,
    y: &[f64],
    params: &HmtParams,
) -> Result<Vec<f64>> {
    mmse_given_q(&vec![true; op.n_coefficients()], op, y, params)
}
