//! EM iteration for fixed `sigma2`, posterior evaluation and the `sigma2` grid search.
//!
//! Each iteration is a Landweber-type E step `z = s + H^T (y - H s)`
//! followed by the exact tree M step of [`crate::max_product`]. The noise
//! variance is chosen from a geometric grid by the marginal posterior of
//! `theta` with `sigma2` integrated out.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{MpemError, Result};
use crate::hmt::{log_prior_q, HmtParams, StateEstimate, TreeStructure};
use crate::max_product::{mstep, MstepInput};
use crate::sensing::SensingOperator;

/// Relative residual at which the conjugate-gradient fallback stops.
pub const CG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    /// Stop once `||s_new - s||^2 / p < delta`.
    pub delta: f64,
    pub max_iters: usize,
    pub grid_k: usize,
    pub grid_d: f64,
    pub record_trace: bool,
    /// Extra bisection rounds in `log sigma2` around the selected grid
    /// point. Zero keeps the plain grid.
    pub refine_steps: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self::small_scale()
    }
}

impl EmConfig {
    /// Simulated small-scale problems: `delta = 1e-10`.
    pub fn small_scale() -> Self {
        Self {
            delta: 1e-10,
            max_iters: 2000,
            grid_k: 16,
            grid_d: 2.0,
            record_trace: true,
            refine_steps: 0,
        }
    }

    /// Medium images: `delta = 0.01`.
    pub fn medium_images() -> Self {
        Self {
            delta: 0.01,
            ..Self::small_scale()
        }
    }

    /// Large images: `delta = 0.1`.
    pub fn large_images() -> Self {
        Self {
            delta: 0.1,
            ..Self::small_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(MpemError::InvalidParameter(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.max_iters == 0 {
            return Err(MpemError::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.grid_k == 0 {
            return Err(MpemError::InvalidParameter("grid_k must be at least 1".into()));
        }
        if !(self.grid_d > 1.0 && self.grid_d.is_finite()) {
            return Err(MpemError::InvalidParameter(format!(
                "grid_d must exceed 1, got {}",
                self.grid_d
            )));
        }
        Ok(())
    }
}

/// Per-iteration record of one EM run: `log_posterior[j]` is
/// `ln p(theta^(j+1) | sigma2, y)` and `conv_metric[j]` the squared step
/// `||s^(j+1) - s^(j)||^2 / p` that produced it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub log_posterior: Vec<f64>,
    pub conv_metric: Vec<f64>,
}

impl EmTrace {
    /// Largest violation of monotonicity, measured relative to `|log p|`;
    /// zero for a non-decreasing sequence.
    pub fn worst_relative_decrease(&self) -> f64 {
        self.log_posterior
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn is_nondecreasing(&self, rel_slack: f64) -> bool {
        self.worst_relative_decrease() <= rel_slack
    }
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub estimate: StateEstimate,
    pub sigma2: f64,
    pub iterations: usize,
    /// False when `max_iters` was reached before the step criterion fired.
    pub converged: bool,
    pub trace: EmTrace,
}

fn check_problem(op: &dyn SensingOperator, y: &[f64], tree: &TreeStructure) -> Result<()> {
    if y.len() != op.n_measurements() {
        return Err(MpemError::Dimension(format!(
            "y has length {} but the operator has {} rows",
            y.len(),
            op.n_measurements()
        )));
    }
    if tree.len() != op.n_coefficients() {
        return Err(MpemError::Dimension(format!(
            "tree has {} nodes but the operator has {} columns",
            tree.len(),
            op.n_coefficients()
        )));
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `z = s + H^T (y - H s)`.
pub fn estep(s: &[f64], op: &dyn SensingOperator, y: &[f64]) -> Result<Vec<f64>> {
    if s.len() != op.n_coefficients() || y.len() != op.n_measurements() {
        return Err(MpemError::Dimension(format!(
            "estep on {}x{} operator with s of length {} and y of length {}",
            op.n_measurements(),
            op.n_coefficients(),
            s.len(),
            y.len()
        )));
    }
    let hs = op.forward(s);
    Ok(estep_from_forward(s, &hs, op, y))
}

fn estep_from_forward(s: &[f64], hs: &[f64], op: &dyn SensingOperator, y: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = y.iter().zip(hs).map(|(a, b)| a - b).collect();
    let mut z = op.adjoint(&r);
    for (zi, si) in z.iter_mut().zip(s) {
        *zi += si;
    }
    z
}

/// `(||y - H s||^2 + s' D(q)^{-1} s)`, given `H s`.
fn quadratic_form(theta: &StateEstimate, hs: &[f64], y: &[f64], params: &HmtParams) -> f64 {
    let resid: f64 = y.iter().zip(hs).map(|(a, b)| (a - b) * (a - b)).sum();
    let prior: f64 = theta
        .q
        .iter()
        .zip(&theta.s)
        .map(|(&q, &s)| s * s / params.relative_variance(q))
        .sum();
    resid + prior
}

fn state_terms(theta: &StateEstimate, tree: &TreeStructure, params: &HmtParams) -> f64 {
    0.5 * (params.eps2 / params.gamma2).ln() * theta.high_count() as f64
        + log_prior_q(&theta.q, tree, params)
}

/// `ln p(theta | sigma2, y)` with additive constant 0; `-inf` if `q` is low
/// anywhere on `A`.
pub fn log_conditional_posterior(
    theta: &StateEstimate,
    sigma2: f64,
    op: &dyn SensingOperator,
    y: &[f64],
    tree: &TreeStructure,
    params: &HmtParams,
) -> f64 {
    let hs = op.forward(&theta.s);
    log_conditional_from_forward(theta, &hs, sigma2, y, tree, params)
}

fn log_conditional_from_forward(
    theta: &StateEstimate,
    hs: &[f64],
    sigma2: f64,
    y: &[f64],
    tree: &TreeStructure,
    params: &HmtParams,
) -> f64 {
    -0.5 * quadratic_form(theta, hs, y, params) / sigma2 + state_terms(theta, tree, params)
}

/// `ln p(theta | y)` with `sigma2` integrated out, additive constant 0:
/// `ln p(q) + 0.5 ln(eps2/gamma2) sum q - (p+N)/2 ln(Q / (p+N))`.
pub fn log_marginal_posterior(
    theta: &StateEstimate,
    op: &dyn SensingOperator,
    y: &[f64],
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<f64> {
    let hs = op.forward(&theta.s);
    log_marginal_from_forward(theta, &hs, y, tree, params)
}

fn log_marginal_from_forward(
    theta: &StateEstimate,
    hs: &[f64],
    y: &[f64],
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<f64> {
    let q = quadratic_form(theta, hs, y, params);
    if !(q > 0.0) {
        return Err(MpemError::Degenerate);
    }
    let m = (theta.len() + y.len()) as f64;
    Ok(state_terms(theta, tree, params) - 0.5 * m * (q / m).ln())
}

/// `(||y - H s||^2 + s' D(q)^{-1} s) / (p + N)`.
pub fn sigma2_hat(
    theta: &StateEstimate,
    op: &dyn SensingOperator,
    y: &[f64],
    params: &HmtParams,
) -> f64 {
    let hs = op.forward(&theta.s);
    quadratic_form(theta, &hs, y, params) / (theta.len() + y.len()) as f64
}

/// `D(q) H^T (I + H D(q) H^T)^{-1} y`, the MMSE estimate of `s` for fixed
/// states. Dense operators use a Cholesky solve of the `N x N` system; other
/// operators run conjugate gradients on `(D^{-1} + H^T H) s = H^T y`.
pub fn mmse_given_q(
    q: &[bool],
    op: &dyn SensingOperator,
    y: &[f64],
    params: &HmtParams,
) -> Result<Vec<f64>> {
    if q.len() != op.n_coefficients() || y.len() != op.n_measurements() {
        return Err(MpemError::Dimension(format!(
            "mmse on {}x{} operator with q of length {} and y of length {}",
            op.n_measurements(),
            op.n_coefficients(),
            q.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = q.iter().map(|&h| params.relative_variance(h)).collect();
    match op.dense() {
        Some(h) => mmse_dense(h, &d, y),
        None => mmse_cg(op, &d, y),
    }
}

fn mmse_dense(h: &DMatrix<f64>, d: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let mut hd = h.clone();
    for (mut col, &dj) in hd.column_iter_mut().zip(d) {
        col *= dj.sqrt();
    }
    let mut m = &hd * hd.transpose();
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| MpemError::Solve("I + H D H^T is not positive definite".into()))?;
    let u = chol.solve(&DVector::from_column_slice(y));
    let htu = h.tr_mul(&u);
    Ok(htu.iter().zip(d).map(|(v, dj)| v * dj).collect())
}

fn mmse_cg(op: &dyn SensingOperator, d: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let p = d.len();
    let b = op.adjoint(y);
    let b_norm = sq_norm(&b).sqrt();
    let mut x = vec![0.0; p];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = op.adjoint(&op.forward(v));
        for ((o, vi), di) in out.iter_mut().zip(v).zip(d) {
            *o += vi / di;
        }
        out
    };
    // Jacobi preconditioner using the average diagonal of H^T H.
    let avg = op.n_measurements() as f64 / p as f64;
    let precond: Vec<f64> = d.iter().map(|di| 1.0 / (1.0 / di + avg)).collect();
    let mut r = b.clone();
    let mut zv: Vec<f64> = r.iter().zip(&precond).map(|(a, m)| a * m).collect();
    let mut dir = zv.clone();
    let mut rz: f64 = r.iter().zip(&zv).map(|(a, b)| a * b).sum();
    for _ in 0..10 * p.max(100) {
        let ad = apply(&dir);
        let alpha = rz / dir.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..p {
            x[i] += alpha * dir[i];
            r[i] -= alpha * ad[i];
        }
        if sq_norm(&r).sqrt() <= CG_TOL * b_norm {
            return Ok(x);
        }
        for i in 0..p {
            zv[i] = r[i] * precond[i];
        }
        let rz_new: f64 = r.iter().zip(&zv).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p {
            dir[i] = zv[i] + beta * dir[i];
        }
    }
    Err(MpemError::Solve(
        "conjugate gradients did not reach the requested tolerance".into(),
    ))
}

/// Alternate E and M steps at fixed `sigma2` starting from `s_init`.
pub fn run_em(
    op: &dyn SensingOperator,
    y: &[f64],
    sigma2: f64,
    s_init: &[f64],
    config: &EmConfig,
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<EmRun> {
    config.validate()?;
    params.validate()?;
    check_problem(op, y, tree)?;
    if s_init.len() != tree.len() {
        return Err(MpemError::Dimension(format!(
            "s_init has length {} but the tree has {} nodes",
            s_init.len(),
            tree.len()
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(MpemError::InvalidParameter(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let p = tree.len() as f64;
    let mut s = s_init.to_vec();
    let mut hs = op.forward(&s);
    let mut trace = EmTrace::default();
    let mut estimate = StateEstimate::zeros(tree);
    estimate.s.copy_from_slice(&s);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let z = estep_from_forward(&s, &hs, op, y);
        estimate = mstep(&MstepInput::new(&z, sigma2, tree, params)?);
        let step = estimate
            .s
            .iter()
            .zip(&s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p;
        s.copy_from_slice(&estimate.s);
        hs = op.forward(&s);
        if config.record_trace {
            trace.log_posterior.push(log_conditional_from_forward(
                &estimate, &hs, sigma2, y, tree, params,
            ));
            trace.conv_metric.push(step);
        }
        if step < config.delta {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        estimate,
        sigma2,
        iterations,
        converged,
        trace,
    })
}

/// One evaluated `sigma2`.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub sigma2: f64,
    pub log_marginal: f64,
    pub iterations: usize,
    pub converged: bool,
    pub estimate: StateEstimate,
    pub trace: EmTrace,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    /// Grid points in evaluation order; refinement points follow the `K`
    /// grid points.
    pub points: Vec<GridPoint>,
    pub selected: usize,
}

impl GridSearchResult {
    pub fn sigma2_selected(&self) -> f64 {
        self.points[self.selected].sigma2
    }

    pub fn estimate(&self) -> &StateEstimate {
        &self.points[self.selected].estimate
    }

    pub fn total_iterations(&self) -> usize {
        self.points.iter().map(|g| g.iterations).sum()
    }

    /// Number of EM runs that stopped at `max_iters`.
    pub fn unconverged_runs(&self) -> usize {
        self.points.iter().filter(|g| !g.converged).count()
    }

    /// Columns `grid_index, sigma2, iteration, log_cond_posterior, conv_metric`.
    pub fn iteration_csv(&self) -> String {
        let mut out = String::from("grid_index,sigma2,iteration,log_cond_posterior,conv_metric\n");
        for (k, g) in self.points.iter().enumerate() {
            for (j, (lp, cm)) in g
                .trace
                .log_posterior
                .iter()
                .zip(&g.trace.conv_metric)
                .enumerate()
            {
                writeln!(out, "{k},{:e},{},{:e},{:e}", g.sigma2, j + 1, lp, cm).unwrap();
            }
        }
        out
    }

    /// Columns `grid_index, sigma2, log_marginal_posterior, iters, selected_flag`.
    pub fn grid_csv(&self) -> String {
        let mut out = String::from("grid_index,sigma2,log_marginal_posterior,iters,selected_flag\n");
        for (k, g) in self.points.iter().enumerate() {
            writeln!(
                out,
                "{k},{:e},{:e},{},{}",
                g.sigma2,
                g.log_marginal,
                g.iterations,
                u8::from(k == self.selected)
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, iterations_path: &Path, grid_path: &Path) -> Result<()> {
        fs::write(iterations_path, self.iteration_csv())
            .map_err(|e| MpemError::io(iterations_path, e))?;
        fs::write(grid_path, self.grid_csv()).map_err(|e| MpemError::io(grid_path, e))
    }
}

/// Largest grid value `||y||^2 / (p + N)`.
pub fn sigma2_max(y: &[f64], p: usize) -> f64 {
    sq_norm(y) / (p + y.len()) as f64
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Run EM at `sigma2_max / d^k`, `k = 0..K`, each warm-started from the
/// previous estimate (the first from zero), and select the point with the
/// largest marginal posterior. Ties keep the earliest point.
pub fn grid_search(
    op: &dyn SensingOperator,
    y: &[f64],
    config: &EmConfig,
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<GridSearchResult> {
    config.validate()?;
    check_problem(op, y, tree)?;
    let smax = sigma2_max(y, tree.len());
    if smax == 0.0 {
        return Err(MpemError::EmptyInput);
    }
    let mut points: Vec<GridPoint> = Vec::with_capacity(config.grid_k);
    let mut s_prev = vec![0.0; tree.len()];
    let mut sigma2 = smax;
    for _ in 0..config.grid_k {
        let point = grid_point(op, y, sigma2, &s_prev, config, tree, params)?;
        s_prev.clone_from(&point.estimate.s);
        points.push(point);
        sigma2 /= config.grid_d;
    }
    let mut selected = argmax_first(points.iter().map(|g| g.log_marginal));

    let mut factor = config.grid_d;
    for _ in 0..config.refine_steps {
        factor = factor.sqrt();
        let center = points[selected].clone();
        for sigma2 in [center.sigma2 * factor, center.sigma2 / factor] {
            let point = grid_point(op, y, sigma2, &center.estimate.s, config, tree, params)?;
            points.push(point);
        }
        selected = argmax_first(points.iter().map(|g| g.log_marginal));
    }
    Ok(GridSearchResult { points, selected })
}

fn grid_point(
    op: &dyn SensingOperator,
    y: &[f64],
    sigma2: f64,
    s_init: &[f64],
    config: &EmConfig,
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<GridPoint> {
    let run = run_em(op, y, sigma2, s_init, config, tree, params)?;
    let log_marginal = log_marginal_posterior(&run.estimate, op, y, tree, params)?;
    Ok(GridPoint {
        sigma2,
        log_marginal,
        iterations: run.iterations,
        converged: run.converged,
        estimate: run.estimate,
        trace: run.trace,
    })
}

/// Alternates an EM run at fixed `sigma2` with `sigma2 <- sigma2_hat(theta)`.
/// Kept as a diagnostic; it tends to stall near its starting point.
pub fn outer_em(
    op: &dyn SensingOperator,
    y: &[f64],
    sigma2_init: f64,
    outer_iters: usize,
    config: &EmConfig,
    tree: &TreeStructure,
    params: &HmtParams,
) -> Result<(Vec<f64>, EmRun)> {
    let mut sigma2 = sigma2_init;
    let mut path = vec![sigma2];
    let mut s = vec![0.0; tree.len()];
    let mut run = run_em(op, y, sigma2, &s, config, tree, params)?;
    for _ in 0..outer_iters {
        let next = sigma2_hat(&run.estimate, op, y, params);
        if !(next > 0.0) {
            break;
        }
        path.push(next);
        let settled = ((next - sigma2) / sigma2).abs() < 1e-12;
        sigma2 = next;
        s.clone_from(&run.estimate.s);
        run = run_em(op, y, sigma2, &s, config, tree, params)?;
        if settled {
            break;
        }
    }
    Ok((path, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmt::sample_prior;
    use crate::max_product::mstep_objective;
    use crate::rng::rng_from_seed;
    use crate::sensing::{gen_white_gaussian, scale_to_unit_spectral_norm, DenseOperator, Transform};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    struct Problem {
        tree: TreeStructure,
        op: DenseOperator,
        y: Vec<f64>,
        truth: StateEstimate,
    }

    fn problem(seed: u64, n: usize) -> Problem {
        let tree = TreeStructure::new(8, 8, 3).unwrap();
        let model = HmtParams::new(1e4, 1.0, 0.5, 0.5, 1e-4).unwrap();
        let truth = sample_prior(&tree, &model, 100.0, seed).unwrap();
        let phi = gen_white_gaussian(n, 64, seed + 1000).unwrap();
        let sp = scale_to_unit_spectral_norm(&phi, &Transform::Identity, &vec![0.0; n], 0.0)
            .unwrap();
        let op = sp.operator;
        let mut rng = rng_from_seed(seed + 2000);
        let y = op
            .forward(&truth.s)
            .into_iter()
            .map(|v| v + 10.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Problem { tree, op, y, truth }
    }

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn random_q(tree: &TreeStructure, seed: u64) -> Vec<bool> {
        let mut rng = rng_from_seed(seed);
        (0..tree.len())
            .map(|i| tree.in_a(i) || rng.random::<f64>() < 0.3)
            .collect()
    }

    /// Operator hiding its dense matrix, to exercise the iterative paths.
    struct Opaque(DenseOperator);

    impl SensingOperator for Opaque {
        fn n_measurements(&self) -> usize {
            self.0.n_measurements()
        }
        fn n_coefficients(&self) -> usize {
            self.0.n_coefficients()
        }
        fn forward_into(&self, s: &[f64], out: &mut [f64]) {
            self.0.forward_into(s, out)
        }
        fn adjoint_into(&self, r: &[f64], out: &mut [f64]) {
            self.0.adjoint_into(r, out)
        }
        fn spectral_norm_certificate(&self) -> f64 {
            self.0.spectral_norm_certificate()
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (d / sq_norm(b)).sqrt()
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate().is_ok());
        assert_eq!(EmConfig::medium_images().delta, 0.01);
        assert_eq!(EmConfig::large_images().delta, 0.1);
        for bad in [
            EmConfig { delta: 0.0, ..Default::default() },
            EmConfig { grid_d: 1.0, ..Default::default() },
            EmConfig { grid_k: 0, ..Default::default() },
            EmConfig { max_iters: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn estep_basic_cases() {
        let pr = problem(1, 32);
        // zero residual
        let s = pr.truth.s.clone();
        let y = pr.op.forward(&s);
        let z = estep(&s, &pr.op, &y).unwrap();
        for (a, b) in z.iter().zip(&s) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        // orthonormal rows and s = 0
        let op = DenseOperator::new(DMatrix::identity(5, 9)).unwrap();
        let y = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        let z = estep(&[0.0; 9], &op, &y).unwrap();
        assert_eq!(z, op.adjoint(&y));
        assert!(estep(&[0.0; 8], &op, &y).is_err());
    }

    /// Conditional mean of the missing data from the full Gaussian model,
    /// `{H' C^{-1} H + I/sigma2}^{-1} {H' C^{-1} y + s/sigma2}` with
    /// `C = sigma2 (I - H H')`. Needs `||H|| < 1` so that `C` is invertible.
    fn missing_data_moments(
        h: &DMatrix<f64>,
        y: &[f64],
        s: &[f64],
        sigma2: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = h.nrows();
        let p = h.ncols();
        let c = (DMatrix::identity(n, n) - h * h.transpose()) * sigma2;
        let c_inv = c.try_inverse().unwrap();
        let prec = h.transpose() * &c_inv * h + DMatrix::identity(p, p) / sigma2;
        let cov = prec.try_inverse().unwrap();
        let rhs = h.transpose() * &c_inv * DVector::from_column_slice(y)
            + DVector::from_column_slice(s) / sigma2;
        (&cov * rhs, cov)
    }

    #[test]
    fn estep_matches_full_conditional_mean() {
        for seed in 0..5 {
            let phi = gen_white_gaussian(6, 10, seed).unwrap();
            let rho = phi.clone().singular_values().max();
            let h = phi / rho * 0.9;
            let op = DenseOperator::new(h.clone()).unwrap();
            let y = randn(6, seed + 10);
            let s = randn(10, seed + 20);
            for sigma2 in [0.01, 1.0, 30.0] {
                let (mean, _) = missing_data_moments(&h, &y, &s, sigma2);
                let z = estep(&s, &op, &y).unwrap();
                assert!(rel_err(&z, mean.as_slice()) < 1e-9);
            }
        }
    }

    #[test]
    fn q_function_differences_match_mstep_objective() {
        let tree = TreeStructure::new(4, 4, 2).unwrap();
        let params = HmtParams::default();
        let phi = gen_white_gaussian(8, 16, 4).unwrap();
        let h = &phi / phi.clone().singular_values().max() * 0.95;
        let op = DenseOperator::new(h.clone()).unwrap();
        let y = randn(8, 5);
        let sigma2 = 0.7;
        let s_j = randn(16, 6);
        let (mean, cov) = missing_data_moments(&h, &y, &s_j, sigma2);
        let z_j = estep(&s_j, &op, &y).unwrap();
        // Expected complete-data log posterior, theta-dependent part.
        let q_fn = |theta: &StateEstimate| {
            let e_dist: f64 = mean
                .iter()
                .zip(&theta.s)
                .map(|(m, s)| (m - s) * (m - s))
                .sum::<f64>()
                + cov.trace();
            let prior: f64 = theta
                .q
                .iter()
                .zip(&theta.s)
                .map(|(&q, &s)| s * s / params.relative_variance(q))
                .sum();
            -0.5 * (e_dist + prior) / sigma2
                + 0.5 * (params.eps2 / params.gamma2).ln() * theta.high_count() as f64
                + log_prior_q(&theta.q, &tree, &params)
        };
        for k in 0..20 {
            let a = StateEstimate { q: random_q(&tree, 100 + k), s: randn(16, 200 + k) };
            let b = StateEstimate { q: random_q(&tree, 300 + k), s: randn(16, 400 + k) };
            let dq = q_fn(&a) - q_fn(&b);
            let dm = mstep_objective(&a, &z_j, sigma2, &tree, &params)
                - mstep_objective(&b, &z_j, sigma2, &tree, &params);
            assert!((dq - dm).abs() < 1e-10 * (1.0 + dq.abs()), "{dq} vs {dm}");
        }
    }

    #[test]
    fn log_conditional_plug_in_and_scalar_loop() {
        let pr = problem(2, 32);
        let params = HmtParams::default();
        let sigma2 = 0.37;
        let all_high = StateEstimate {
            q: vec![true; 64],
            s: vec![0.0; 64],
        };
        let v = log_conditional_posterior(&all_high, sigma2, &pr.op, &pr.y, &pr.tree, &params);
        let expected = -0.5 * sq_norm(&pr.y) / sigma2
            + 0.5 * 64.0 * (params.eps2 / params.gamma2).ln()
            + log_prior_q(&all_high.q, &pr.tree, &params);
        assert!((v - expected).abs() < 1e-10 * expected.abs());

        let h = pr.op.matrix();
        for k in 0..10 {
            let theta = StateEstimate { q: random_q(&pr.tree, k), s: randn(64, 50 + k) };
            let mut resid = 0.0;
            for i in 0..32 {
                let mut hs = 0.0;
                for j in 0..64 {
                    hs += h[(i, j)] * theta.s[j];
                }
                resid += (pr.y[i] - hs).powi(2);
            }
            let mut quad = 0.0;
            let mut nq = 0.0;
            for j in 0..64 {
                let v = if theta.q[j] { params.gamma2 } else { params.eps2 };
                quad += theta.s[j] * theta.s[j] / v;
                if theta.q[j] {
                    nq += 1.0;
                }
            }
            let oracle = -0.5 * (resid + quad) / sigma2
                + 0.5 * nq * (params.eps2 / params.gamma2).ln()
                + log_prior_q(&theta.q, &pr.tree, &params);
            let v = log_conditional_posterior(&theta, sigma2, &pr.op, &pr.y, &pr.tree, &params);
            assert!((v - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }

        let mut pinned_low = StateEstimate::zeros(&pr.tree);
        pinned_low.q[0] = false;
        let v = log_conditional_posterior(&pinned_low, 1.0, &pr.op, &pr.y, &pr.tree, &params);
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn log_marginal_scaling_identity() {
        let pr = problem(3, 32);
        let params = HmtParams::default();
        let theta = StateEstimate { q: random_q(&pr.tree, 1), s: randn(64, 2) };
        let base = log_marginal_posterior(&theta, &pr.op, &pr.y, &pr.tree, &params).unwrap();
        for c in [0.1, 3.0, 250.0] {
            let y: Vec<f64> = pr.y.iter().map(|v| v * c).collect();
            let t = StateEstimate {
                q: theta.q.clone(),
                s: theta.s.iter().map(|v| v * c).collect(),
            };
            let v = log_marginal_posterior(&t, &pr.op, &y, &pr.tree, &params).unwrap();
            let expected = base - 96.0 * f64::ln(c);
            assert!((v - expected).abs() < 1e-10 * expected.abs().max(1.0));
        }
        let zero = StateEstimate::zeros(&pr.tree);
        assert!(matches!(
            log_marginal_posterior(&zero, &pr.op, &[0.0; 32], &pr.tree, &params),
            Err(MpemError::Degenerate)
        ));
    }

    #[test]
    fn marginal_is_maximized_at_mmse_and_matches_concentrated_form() {
        let pr = problem(4, 32);
        let params = HmtParams::default();
        let h = pr.op.matrix();
        for k in 0..5 {
            let q = random_q(&pr.tree, 10 + k);
            let sbar = mmse_given_q(&q, &pr.op, &pr.y, &params).unwrap();
            let theta = StateEstimate { q: q.clone(), s: sbar.clone() };
            let at_sbar =
                log_marginal_posterior(&theta, &pr.op, &pr.y, &pr.tree, &params).unwrap();
            let mut rng = rng_from_seed(k);
            for _ in 0..100 {
                let scale = 10f64.powf(rng.random::<f64>() * 4.0 - 3.0);
                let s: Vec<f64> = sbar
                    .iter()
                    .map(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let t = StateEstimate { q: q.clone(), s };
                let v = log_marginal_posterior(&t, &pr.op, &pr.y, &pr.tree, &params).unwrap();
                assert!(v <= at_sbar + 1e-12 * at_sbar.abs());
            }
            // profile form: y' (I + H D H')^{-1} y replaces the quadratic form
            let d = DMatrix::from_diagonal(&DVector::from_iterator(
                64,
                q.iter().map(|&b| params.relative_variance(b)),
            ));
            let m = DMatrix::identity(32, 32) + h * d * h.transpose();
            let yv = DVector::from_column_slice(&pr.y);
            let quad = yv.dot(&m.lu().solve(&yv).unwrap());
            let concentrated = 0.5 * (params.eps2 / params.gamma2).ln() * theta.high_count() as f64
                + log_prior_q(&q, &pr.tree, &params)
                - 48.0 * (quad / 96.0).ln();
            assert!((at_sbar - concentrated).abs() < 1e-9 * concentrated.abs());
        }
    }

    #[test]
    fn mmse_identity_operator() {
        let op = DenseOperator::new(DMatrix::identity(6, 6)).unwrap();
        let params = HmtParams::default();
        let y = randn(6, 1);
        let s = mmse_given_q(&[true; 6], &op, &y, &params).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a - 1000.0 / 1001.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn mmse_matches_information_form_and_cg() {
        let params = HmtParams::default();
        for seed in 0..5 {
            let pr = problem(10 + seed, 24);
            let q = random_q(&pr.tree, seed);
            let s = mmse_given_q(&q, &pr.op, &pr.y, &params).unwrap();
            let h = pr.op.matrix();
            let dinv = DMatrix::from_diagonal(&DVector::from_iterator(
                64,
                q.iter().map(|&b| 1.0 / params.relative_variance(b)),
            ));
            let lhs = dinv + h.transpose() * h;
            let rhs = h.transpose() * DVector::from_column_slice(&pr.y);
            let oracle = lhs.cholesky().unwrap().solve(&rhs);
            assert!(rel_err(&s, oracle.as_slice()) < 1e-9);
            let cg = mmse_given_q(&q, &Opaque(pr.op.clone()), &pr.y, &params).unwrap();
            assert!(rel_err(&cg, oracle.as_slice()) < 1e-8);
        }
    }

    #[test]
    fn mmse_vanishes_as_eps2_shrinks() {
        let pr = problem(5, 32);
        let q = vec![false; 64];
        let mut last = f64::INFINITY;
        for eps2 in [1e-1, 1e-3, 1e-5, 1e-8] {
            let params = HmtParams::new(1000.0, eps2, 0.2, 0.2, 1e-5).unwrap();
            let n = sq_norm(&mmse_given_q(&q, &pr.op, &pr.y, &params).unwrap()).sqrt();
            assert!(n < last);
            last = n;
        }
        assert!(last < 1e-6 * sq_norm(&pr.y).sqrt());
    }

    #[test]
    fn low_state_energy_grows_with_eps2() {
        // Individual low-state coefficients may cross zero as eps2 moves;
        // their total energy is monotone because 1/eps2 weights exactly
        // that energy in the penalized least-squares problem.
        for seed in 0..10 {
            let pr = problem(20 + seed, 32);
            let q = random_q(&pr.tree, seed);
            let mut prev = 0.0;
            for eps2 in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 10.0] {
                let params = HmtParams::new(1000.0, eps2, 0.2, 0.2, 1e-5).unwrap();
                let s = mmse_given_q(&q, &pr.op, &pr.y, &params).unwrap();
                let energy: f64 = (0..64).filter(|&i| !q[i]).map(|i| s[i] * s[i]).sum();
                assert!(energy >= prev * (1.0 - 1e-12), "seed {seed} eps2 {eps2}");
                prev = energy;
            }
        }
    }

    #[test]
    fn em_is_monotone_and_reaches_fixed_point() {
        let params = HmtParams::default();
        let config = EmConfig {
            delta: 1e-14,
            max_iters: 100_000,
            ..Default::default()
        };
        for seed in 0..10 {
            let pr = problem(seed, 32);
            let smax = sigma2_max(&pr.y, 64);
            let run = run_em(&pr.op, &pr.y, smax / 64.0, &[0.0; 64], &config, &pr.tree, &params)
                .unwrap();
            assert!(run.converged);
            assert!(run.trace.is_nondecreasing(1e-9));
            let sbar = mmse_given_q(&run.estimate.q, &pr.op, &pr.y, &params).unwrap();
            assert!(rel_err(&run.estimate.s, &sbar) <= 1e-6);
        }
    }

    #[test]
    fn zero_measurements_converge_immediately() {
        let pr = problem(0, 32);
        let params = HmtParams::default();
        let run = run_em(&pr.op, &[0.0; 32], 1.0, &[0.0; 64], &EmConfig::default(), &pr.tree, &params)
            .unwrap();
        assert_eq!(run.iterations, 1);
        assert!(run.converged);
        assert!(run.estimate.s.iter().all(|&v| v == 0.0));
        for &i in pr.tree.set_t() {
            assert!(!run.estimate.q[i]);
        }
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let pr = problem(6, 32);
        let config = EmConfig {
            max_iters: 2,
            delta: 1e-300,
            ..Default::default()
        };
        let run = run_em(&pr.op, &pr.y, 1e-3, &[0.0; 64], &config, &pr.tree, &HmtParams::default())
            .unwrap();
        assert_eq!(run.iterations, 2);
        assert!(!run.converged);
        assert_eq!(run.trace.log_posterior.len(), 2);
    }

    #[test]
    fn sigma2_hat_cases() {
        let op = DenseOperator::new(DMatrix::identity(2, 2)).unwrap();
        let params = HmtParams::new(4.0, 0.5, 0.2, 0.2, 0.1).unwrap();
        let zero = StateEstimate {
            q: vec![true, false],
            s: vec![0.0, 0.0],
        };
        assert_eq!(sigma2_hat(&zero, &op, &[0.0, 0.0], &params), 0.0);
        // ||y - s||^2 = 1 + 4, s' D^{-1} s = 4/4 + 1/0.5, p + N = 4
        let theta = StateEstimate {
            q: vec![true, false],
            s: vec![2.0, 1.0],
        };
        let v = sigma2_hat(&theta, &op, &[3.0, -1.0], &params);
        assert!((v - 8.0 / 4.0).abs() < 1e-15);
        assert!(sigma2_hat(&zero, &op, &[0.1, 0.0], &params) > 0.0);
    }

    #[test]
    fn grid_arithmetic_and_selection() {
        let tree = TreeStructure::new(2, 2, 1).unwrap();
        let op = DenseOperator::new(DMatrix::identity(4, 4)).unwrap();
        let y = vec![1.0; 4];
        assert_eq!(sigma2_max(&y, 4), 0.5);
        let config = EmConfig {
            grid_k: 5,
            ..Default::default()
        };
        let res = grid_search(&op, &y, &config, &tree, &HmtParams::default()).unwrap();
        let sig: Vec<f64> = res.points.iter().map(|g| g.sigma2).collect();
        assert_eq!(sig, vec![0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert!(matches!(
            grid_search(&op, &[0.0; 4], &config, &tree, &HmtParams::default()),
            Err(MpemError::EmptyInput)
        ));
    }

    #[test]
    fn grid_selects_argmax_and_single_point_matches_run_em() {
        let params = HmtParams::default();
        for seed in 0..5 {
            let pr = problem(40 + seed, 32);
            let res = grid_search(&pr.op, &pr.y, &EmConfig::default(), &pr.tree, &params).unwrap();
            assert_eq!(res.points.len(), 16);
            assert_eq!(res.points[0].sigma2, sq_norm(&pr.y) / 96.0);
            let best = res.points[res.selected].log_marginal;
            assert!(res.points.iter().all(|g| g.log_marginal <= best));

            let one = EmConfig {
                grid_k: 1,
                ..Default::default()
            };
            let res1 = grid_search(&pr.op, &pr.y, &one, &pr.tree, &params).unwrap();
            let run = run_em(&pr.op, &pr.y, res1.sigma2_selected(), &[0.0; 64], &one, &pr.tree, &params)
                .unwrap();
            assert_eq!(res1.estimate(), &run.estimate);
        }
    }

    #[test]
    fn refinement_never_lowers_the_selected_value() {
        let params = HmtParams::default();
        let pr = problem(50, 32);
        let plain = grid_search(&pr.op, &pr.y, &EmConfig::default(), &pr.tree, &params).unwrap();
        let cfg = EmConfig {
            refine_steps: 3,
            ..Default::default()
        };
        let refined = grid_search(&pr.op, &pr.y, &cfg, &pr.tree, &params).unwrap();
        assert_eq!(refined.points.len(), 16 + 6);
        assert!(
            refined.points[refined.selected].log_marginal
                >= plain.points[plain.selected].log_marginal
        );
    }

    #[test]
    fn trace_csv_layout() {
        let pr = problem(7, 32);
        let config = EmConfig {
            grid_k: 3,
            ..Default::default()
        };
        let res = grid_search(&pr.op, &pr.y, &config, &pr.tree, &HmtParams::default()).unwrap();
        let grid = res.grid_csv();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines[0], "grid_index,sigma2,log_marginal_posterior,iters,selected_flag");
        assert_eq!(lines.len(), 4);
        let flags: usize = lines[1..]
            .iter()
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(flags, 1);
        let iters = res.iteration_csv();
        assert_eq!(iters.lines().count(), 1 + res.total_iterations());
    }

    #[test]
    fn outer_em_runs() {
        let pr = problem(8, 32);
        let (path, run) = outer_em(
            &pr.op,
            &pr.y,
            sigma2_max(&pr.y, 64),
            5,
            &EmConfig::default(),
            &pr.tree,
            &HmtParams::default(),
        )
        .unwrap();
        assert!(path.len() >= 2);
        assert!(path.iter().all(|v| *v > 0.0));
        assert_eq!(run.sigma2, *path.last().unwrap());
    }
}
