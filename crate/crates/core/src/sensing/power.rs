//! Power iteration for the largest singular value of a linear map.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{MpemError, Result};
use crate::rng::rng_from_seed;

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 10_000;
const POWER_SEED: u64 = 0x5E_ED0F_9A11;

/// Estimate `rho_A` by iterating `v <- A^T A v / ||A^T A v||`.
///
/// Stops when the relative change of the Rayleigh quotient `||A v||^2` drops
/// below `tol`. The returned value is `sqrt` of that quotient and therefore
/// never exceeds the true spectral norm.
pub fn power_iteration<F, G>(
    dim: usize,
    forward: F,
    adjoint: G,
    tol: f64,
    max_iters: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = rng_from_seed(POWER_SEED);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut last = f64::NAN;
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let av = forward(&v);
        let rayleigh: f64 = av.iter().map(|x| x * x).sum();
        if rayleigh == 0.0 {
            return Ok(0.0);
        }
        change = ((rayleigh - last) / rayleigh).abs();
        last = rayleigh;
        if change < tol {
            return Ok(rayleigh.sqrt());
        }
        v = adjoint(&av);
        if normalize(&mut v) == 0.0 {
            return Ok(0.0);
        }
    }
    Err(MpemError::Convergence {
        iterations: max_iters,
        last_change: change,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
