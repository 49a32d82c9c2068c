use std::fmt::{self, Write as _};
use std::time::Instant;

use rayon::prelude::*;

use super::{all_high_baseline, genie_baseline, nmse, psnr_db};
use crate::em::{grid_search, EmConfig};
use crate::error::{MpemError, Result};
use crate::hmt::{sample_prior, HmtParams, TreeStructure};
use crate::rng::derive_seed;
use crate::sensing::{
    gen_col_correlated, gen_row_correlated, gen_white_gaussian, scale_to_unit_spectral_norm,
    simulate_measurements, SensingOperator, StructurallyRandomOperator, Transform,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixKind {
    White,
    RowCorrelated(f64),
    ColCorrelated(f64),
    StructurallyRandom,
}

impl MatrixKind {
    pub fn label(&self) -> &'static str {
        match self {
            MatrixKind::White => "white",
            MatrixKind::RowCorrelated(_) => "row_corr",
            MatrixKind::ColCorrelated(_) => "col_corr",
            MatrixKind::StructurallyRandom => "structurally_random",
        }
    }

    /// Correlation coefficient, zero for uncorrelated kinds.
    pub fn correlation(&self) -> f64 {
        match *self {
            MatrixKind::RowCorrelated(r) | MatrixKind::ColCorrelated(r) => r,
            _ => 0.0,
        }
    }

    /// Parses `white`, `row_corr`, `col_corr` or `structurally_random`;
    /// `corr` feeds the correlated kinds.
    pub fn parse(label: &str, corr: f64) -> Result<Self> {
        match label {
            "white" => Ok(MatrixKind::White),
            "row_corr" => Ok(MatrixKind::RowCorrelated(corr)),
            "col_corr" => Ok(MatrixKind::ColCorrelated(corr)),
            "structurally_random" | "srm" => Ok(MatrixKind::StructurallyRandom),
            other => Err(MpemError::Config(format!("unknown matrix kind {other:?}"))),
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sensing operator `H` for a `rows x cols` coefficient grid with `n` rows.
///
/// Gaussian kinds use `psi` as the synthesis transform and are scaled to
/// unit spectral norm; the structurally random kind always synthesizes
/// through the `levels`-level Haar transform.
pub fn build_operator(
    kind: MatrixKind,
    rows: usize,
    cols: usize,
    levels: usize,
    n: usize,
    psi: &Transform,
    seed: u64,
) -> Result<Box<dyn SensingOperator>> {
    let p = rows * cols;
    let phi = match kind {
        MatrixKind::White => gen_white_gaussian(n, p, seed)?,
        MatrixKind::RowCorrelated(r) => gen_row_correlated(n, p, r, seed)?,
        MatrixKind::ColCorrelated(c) => gen_col_correlated(n, p, c, seed)?,
        MatrixKind::StructurallyRandom => {
            return Ok(Box::new(StructurallyRandomOperator::new(
                rows, cols, n, levels, seed,
            )?))
        }
    };
    let scaled = scale_to_unit_spectral_norm(&phi, psi, &vec![0.0; n], 0.0)?;
    Ok(Box::new(scaled.operator))
}

/// One Monte Carlo configuration. Signals are drawn from the prior with
/// `model` and `sigma2_star`; reconstruction uses `algo` and `em`.
#[derive(Debug, Clone)]
pub struct TrialSpec {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    pub matrix: MatrixKind,
    pub n_over_p: f64,
    pub model: HmtParams,
    pub sigma2_star: f64,
    pub algo: HmtParams,
    pub em: EmConfig,
    pub master_seed: u64,
    pub n_trials: usize,
    /// Also compute the genie and all-high MMSE baselines.
    pub baselines: bool,
    /// Record wall-clock times; when false `wall_ms` is 0 so that result
    /// files are byte-identical across runs.
    pub timing: bool,
}

impl TrialSpec {
    /// Simulation defaults: 32x32 grid, `L = 4`, white Gaussian sampling,
    /// `N/p = 0.4`, model `eps2 = 1, sigma2 = 1e-6, p_root = p_high = 0.5,
    /// p_low = 1e-4, gamma2 = 1e4`, reconstruction with the default tuning.
    pub fn small_scale() -> Self {
        Self {
            rows: 32,
            cols: 32,
            levels: 4,
            matrix: MatrixKind::White,
            n_over_p: 0.4,
            model: HmtParams {
                gamma2: 1e4,
                eps2: 1.0,
                p_root: 0.5,
                p_high: 0.5,
                p_low: 1e-4,
            },
            sigma2_star: 1e-6,
            algo: HmtParams::default(),
            em: EmConfig {
                record_trace: false,
                ..EmConfig::small_scale()
            },
            master_seed: 0,
            n_trials: 50,
            baselines: true,
            timing: true,
        }
    }

    pub fn p(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n(&self) -> usize {
        (self.n_over_p * self.p() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_over_p > 0.0 && self.n_over_p <= 1.0) {
            return Err(MpemError::InvalidParameter(format!(
                "N/p must lie in (0, 1], got {}",
                self.n_over_p
            )));
        }
        if self.n() == 0 {
            return Err(MpemError::InvalidParameter("N/p yields zero measurements".into()));
        }
        if !(self.sigma2_star > 0.0) {
            return Err(MpemError::InvalidParameter(
                "simulated sigma2 must be positive".into(),
            ));
        }
        self.model.validate()?;
        self.algo.validate()?;
        self.em.validate()?;
        TreeStructure::new(self.rows, self.cols, self.levels).map(|_| ())
    }

    /// Transform used by the Gaussian kinds: identity for simulated
    /// coefficients, Haar for the structurally random operator.
    fn psi(&self) -> Result<Transform> {
        match self.matrix {
            MatrixKind::StructurallyRandom => Transform::haar(self.rows, self.cols, self.levels),
            _ => Ok(Transform::Identity),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub matrix: MatrixKind,
    pub n_over_p: f64,
    pub gamma2_star: f64,
    pub nmse: f64,
    pub psnr_db: f64,
    pub sigma2_selected: f64,
    pub em_iters_total: usize,
    pub wall_ms: u64,
    /// Grid points whose EM run hit the iteration cap.
    pub unconverged_runs: usize,
    pub genie_nmse: Option<f64>,
    pub all_high_nmse: Option<f64>,
    pub error: Option<String>,
}

impl TrialResult {
    fn failed(spec: &TrialSpec, trial: usize, seed: u64, err: MpemError, wall_ms: u64) -> Self {
        Self {
            trial,
            seed,
            matrix: spec.matrix,
            n_over_p: spec.n_over_p,
            gamma2_star: spec.model.gamma2,
            nmse: f64::NAN,
            psnr_db: f64::NAN,
            sigma2_selected: f64::NAN,
            em_iters_total: 0,
            wall_ms,
            unconverged_runs: 0,
            genie_nmse: None,
            all_high_nmse: None,
            error: Some(err.to_string()),
        }
    }
}

/// Draws a fresh operator, signal and noise for trial `trial` and runs the
/// grid search. Failures are reported inside the result.
pub fn run_trial(spec: &TrialSpec, trial: usize) -> TrialResult {
    let seed = derive_seed(spec.master_seed, "trial", trial as u64);
    let start = Instant::now();
    let outcome = trial_inner(spec, trial, seed);
    let wall_ms = if spec.timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    match outcome {
        Ok(mut r) => {
            r.wall_ms = wall_ms;
            r
        }
        Err(e) => TrialResult::failed(spec, trial, seed, e, wall_ms),
    }
}

fn trial_inner(spec: &TrialSpec, trial: usize, seed: u64) -> Result<TrialResult> {
    let tree = TreeStructure::new(spec.rows, spec.cols, spec.levels)?;
    let psi = spec.psi()?;
    let op = build_operator(
        spec.matrix,
        spec.rows,
        spec.cols,
        spec.levels,
        spec.n(),
        &psi,
        derive_seed(seed, "matrix", 0),
    )?;
    let truth = sample_prior(&tree, &spec.model, spec.sigma2_star, derive_seed(seed, "signal", 0))?;
    let y = simulate_measurements(
        op.as_ref(),
        &truth.s,
        spec.sigma2_star,
        derive_seed(seed, "noise", 0),
    )?
    .y;
    let res = grid_search(op.as_ref(), &y, &spec.em, &tree, &spec.algo)?;
    let est = res.estimate();
    let nmse_v = nmse(&est.s, &truth.s)?;
    let psnr = match psnr_db(&est.s, &truth.s, &psi) {
        Err(MpemError::InfiniteValue) => f64::INFINITY,
        other => other?,
    };
    let (genie, all_high) = if spec.baselines {
        let g = genie_baseline(&truth.q, op.as_ref(), &y, &spec.model)?;
        let a = all_high_baseline(op.as_ref(), &y, &spec.algo)?;
        (Some(nmse(&g, &truth.s)?), Some(nmse(&a, &truth.s)?))
    } else {
        (None, None)
    };
    Ok(TrialResult {
        trial,
        seed,
        matrix: spec.matrix,
        n_over_p: spec.n_over_p,
        gamma2_star: spec.model.gamma2,
        nmse: nmse_v,
        psnr_db: psnr,
        sigma2_selected: res.sigma2_selected(),
        em_iters_total: res.total_iterations(),
        wall_ms: 0,
        unconverged_runs: res.unconverged_runs(),
        genie_nmse: genie,
        all_high_nmse: all_high,
        error: None,
    })
}

/// Runs all trials of `spec` on `threads` workers (0 = all cores).
/// Results are ordered by trial index whatever the completion order.
pub fn run_sweep(
    spec: &TrialSpec,
    threads: usize,
    progress: Option<&(dyn Fn(&TrialResult) + Sync)>,
) -> Result<Vec<TrialResult>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MpemError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..spec.n_trials)
            .into_par_iter()
            .map(|t| {
                let r = run_trial(spec, t);
                if let Some(cb) = progress {
                    cb(&r);
                }
                r
            })
            .collect()
    }))
}

pub const RESULTS_HEADER: &str = "trial,seed,matrix_kind,r_or_c,N_over_p,gamma2_star,nmse,psnr_db,sigma2_selected,em_iters_total,wall_ms";

pub fn results_csv(results: &[TrialResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.trial,
            r.seed,
            r.matrix.label(),
            r.matrix.correlation(),
            r.n_over_p,
            r.gamma2_star,
            r.nmse,
            r.psnr_db,
            r.sigma2_selected,
            r.em_iters_total,
            r.wall_ms
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub matrix: MatrixKind,
    pub n_over_p: f64,
    pub gamma2_star: f64,
    pub trials: usize,
    pub failed: usize,
    pub unconverged_runs: usize,
    pub mean_nmse: f64,
    /// Standard error of `mean_nmse`.
    pub se_nmse: f64,
    pub mean_psnr_db: f64,
    pub mean_genie_nmse: Option<f64>,
    pub se_genie_nmse: Option<f64>,
    pub mean_all_high_nmse: Option<f64>,
    pub mean_iters: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups results by `(matrix kind, N/p, gamma2_star)` in first-appearance order.
/// Failed trials are counted and excluded from the means.
pub fn aggregate(results: &[TrialResult]) -> Vec<AggregateRow> {
    let mut keys: Vec<(MatrixKind, f64, f64)> = Vec::new();
    for r in results {
        let key = (r.matrix, r.n_over_p, r.gamma2_star);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(matrix, n_over_p, gamma2_star)| {
            let group: Vec<&TrialResult> = results
                .iter()
                .filter(|r| {
                    r.matrix == matrix && r.n_over_p == n_over_p && r.gamma2_star == gamma2_star
                })
                .collect();
            let ok: Vec<&TrialResult> = group.iter().copied().filter(|r| r.error.is_none()).collect();
            let nmses: Vec<f64> = ok.iter().map(|r| r.nmse).collect();
            let (mean_nmse, se_nmse) = mean_se(&nmses);
            let finite_psnr: Vec<f64> =
                ok.iter().map(|r| r.psnr_db).filter(|v| v.is_finite()).collect();
            let genie: Vec<f64> = ok.iter().filter_map(|r| r.genie_nmse).collect();
            let all_high: Vec<f64> = ok.iter().filter_map(|r| r.all_high_nmse).collect();
            let (mg, sg) = mean_se(&genie);
            AggregateRow {
                matrix,
                n_over_p,
                gamma2_star,
                trials: group.len(),
                failed: group.len() - ok.len(),
                unconverged_runs: ok.iter().map(|r| r.unconverged_runs).sum(),
                mean_nmse,
                se_nmse,
                mean_psnr_db: mean_se(&finite_psnr).0,
                mean_genie_nmse: (!genie.is_empty()).then_some(mg),
                se_genie_nmse: (!genie.is_empty()).then_some(sg),
                mean_all_high_nmse: (!all_high.is_empty()).then(|| mean_se(&all_high).0),
                mean_iters: mean_se(&ok.iter().map(|r| r.em_iters_total as f64).collect::<Vec<_>>()).0,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "matrix_kind,r_or_c,N_over_p,gamma2_star,trials,failed,unconverged_runs,mean_nmse,se_nmse,mean_psnr_db,mean_genie_nmse,mean_all_high_nmse,mean_em_iters\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.matrix.label(),
            r.matrix.correlation(),
            r.n_over_p,
            r.gamma2_star,
            r.trials,
            r.failed,
            r.unconverged_runs,
            r.mean_nmse,
            r.se_nmse,
            r.mean_psnr_db,
            opt(r.mean_genie_nmse),
            opt(r.mean_all_high_nmse),
            r.mean_iters
        )
        .unwrap();
    }
    out
}
