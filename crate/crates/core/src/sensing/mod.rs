//! Sensing operators `H = Phi Psi / rho_Phi` and measurement simulation.

mod haar;
pub mod io;
mod matrices;
mod power;
mod srm;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use rand_distr::{Distribution, StandardNormal};

pub use haar::{haar_dwt2, haar_idwt2};
pub use matrices::{gen_col_correlated, gen_row_correlated, gen_white_gaussian};
pub use power::{power_iteration, POWER_MAX_ITERS, POWER_TOL};
pub use srm::StructurallyRandomOperator;

use crate::error::{MpemError, Result};
use crate::rng::rng_from_seed;

/// A linear map `y = H s` with its transpose.
///
/// Implementations must have unit spectral norm; the certificate reports
/// the value the constructor established.
pub trait SensingOperator: Send + Sync {
    fn n_measurements(&self) -> usize;

    fn n_coefficients(&self) -> usize;

    fn forward_into(&self, s: &[f64], out: &mut [f64]);

    fn adjoint_into(&self, r: &[f64], out: &mut [f64]);

    fn spectral_norm_certificate(&self) -> f64;

    /// Materialized matrix, when the operator is stored densely.
    fn dense(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn forward(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_measurements()];
        self.forward_into(s, &mut out);
        out
    }

    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_coefficients()];
        self.adjoint_into(r, &mut out);
        out
    }
}

/// Orthogonal synthesis transform `Psi` acting on columnwise-linearized grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Haar {
        rows: usize,
        cols: usize,
        levels: usize,
    },
}

impl Transform {
    pub fn haar(rows: usize, cols: usize, levels: usize) -> Result<Self> {
        // Validate once up front so apply calls cannot fail.
        haar_dwt2(&DMatrix::zeros(rows, cols), levels)?;
        Ok(Transform::Haar { rows, cols, levels })
    }

    /// `Psi s`: coefficients to signal domain.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        match *self {
            Transform::Identity => coeffs.to_vec(),
            Transform::Haar { rows, cols, levels } => {
                let m = DMatrix::from_column_slice(rows, cols, coeffs);
                haar_idwt2(&m, levels)
                    .expect("dimensions validated at construction")
                    .as_slice()
                    .to_vec()
            }
        }
    }

    /// `Psi^T x`: signal domain to coefficients.
    pub fn analyze(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Transform::Identity => x.to_vec(),
            Transform::Haar { rows, cols, levels } => {
                let m = DMatrix::from_column_slice(rows, cols, x);
                haar_dwt2(&m, levels)
                    .expect("dimensions validated at construction")
                    .as_slice()
                    .to_vec()
            }
        }
    }
}

/// Dense sensing matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    h: DMatrix<f64>,
    certificate: OnceLock<f64>,
}

impl DenseOperator {
    /// Wrap a matrix that already has (approximately) unit spectral norm.
    /// The certificate is measured by power iteration on first request.
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(MpemError::Dimension("empty sensing matrix".into()));
        }
        Ok(Self {
            h,
            certificate: OnceLock::new(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl SensingOperator for DenseOperator {
    fn n_measurements(&self) -> usize {
        self.h.nrows()
    }

    fn n_coefficients(&self) -> usize {
        self.h.ncols()
    }

    fn forward_into(&self, s: &[f64], out: &mut [f64]) {
        dense_forward(&self.h, s, out);
    }

    fn adjoint_into(&self, r: &[f64], out: &mut [f64]) {
        dense_adjoint(&self.h, r, out);
    }

    /// NaN if power iteration fails to converge.
    fn spectral_norm_certificate(&self) -> f64 {
        *self
            .certificate
            .get_or_init(|| matrix_spectral_norm(&self.h).unwrap_or(f64::NAN))
    }

    fn dense(&self) -> Option<&DMatrix<f64>> {
        Some(&self.h)
    }
}

fn dense_forward(h: &DMatrix<f64>, s: &[f64], out: &mut [f64]) {
    let s = DVectorView::from_slice(s, h.ncols());
    let mut out = DVectorViewMut::from_slice(out, h.nrows());
    out.gemv(1.0, h, &s, 0.0);
}

fn dense_adjoint(h: &DMatrix<f64>, r: &[f64], out: &mut [f64]) {
    let r = DVectorView::from_slice(r, h.nrows());
    let mut out = DVectorViewMut::from_slice(out, h.ncols());
    out.gemv_tr(1.0, h, &r, 0.0);
}

/// Largest singular value of a dense matrix by power iteration.
pub fn matrix_spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    power_iteration(
        m.ncols(),
        |v| {
            let mut out = vec![0.0; m.nrows()];
            dense_forward(m, v, &mut out);
            out
        },
        |r| {
            let mut out = vec![0.0; m.ncols()];
            dense_adjoint(m, r, &mut out);
            out
        },
        POWER_TOL,
        POWER_MAX_ITERS,
    )
}

/// Spectral norm of an arbitrary operator by power iteration.
pub fn operator_spectral_norm(op: &dyn SensingOperator) -> Result<f64> {
    power_iteration(
        op.n_coefficients(),
        |v| op.forward(v),
        |r| op.adjoint(r),
        POWER_TOL,
        POWER_MAX_ITERS,
    )
}

/// Output of [`scale_to_unit_spectral_norm`].
#[derive(Debug, Clone)]
pub struct ScaledProblem {
    pub operator: DenseOperator,
    pub y: Vec<f64>,
    pub sigma2: f64,
    /// Estimated `rho_Phi` the inputs were divided by.
    pub phi_norm: f64,
}

/// Build `H = Phi Psi / rho_Phi` and rescale `y` and `sigma2` to match.
pub fn scale_to_unit_spectral_norm(
    phi: &DMatrix<f64>,
    psi: &Transform,
    y_raw: &[f64],
    sigma2_raw: f64,
) -> Result<ScaledProblem> {
    if y_raw.len() != phi.nrows() {
        return Err(MpemError::Dimension(format!(
            "measurement length {} does not match {} sampling rows",
            y_raw.len(),
            phi.nrows()
        )));
    }
    if let Transform::Haar { rows, cols, .. } = psi {
        if rows * cols != phi.ncols() {
            return Err(MpemError::Dimension(format!(
                "transform size {rows}x{cols} does not match {} sampling columns",
                phi.ncols()
            )));
        }
    }
    let rho = matrix_spectral_norm(phi)?;
    if !(rho > 0.0) {
        return Err(MpemError::Dimension("sampling matrix is zero".into()));
    }
    let mut h = match psi {
        Transform::Identity => phi.clone(),
        Transform::Haar { .. } => {
            // Row i of Phi Psi is (Psi^T phi_i)^T.
            let mut h = DMatrix::zeros(phi.nrows(), phi.ncols());
            for i in 0..phi.nrows() {
                let row: Vec<f64> = phi.row(i).iter().copied().collect();
                let coeffs = psi.analyze(&row);
                for (j, c) in coeffs.into_iter().enumerate() {
                    h[(i, j)] = c;
                }
            }
            h
        }
    };
    h /= rho;
    let operator = DenseOperator::new(h)?;
    Ok(ScaledProblem {
        operator,
        y: y_raw.iter().map(|v| v / rho).collect(),
        sigma2: sigma2_raw / (rho * rho),
        phi_norm: rho,
    })
}

/// Noisy measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub sigma2_true: Option<f64>,
}

/// `y = H s + w` with `w ~ N(0, sigma2 I)`; `sigma2 = 0` yields `y = H s` exactly.
pub fn simulate_measurements(
    op: &dyn SensingOperator,
    s: &[f64],
    sigma2: f64,
    seed: u64,
) -> Result<Measurement> {
    if s.len() != op.n_coefficients() {
        return Err(MpemError::Dimension(format!(
            "signal length {} does not match {} operator columns",
            s.len(),
            op.n_coefficients()
        )));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(MpemError::InvalidParameter(format!(
            "noise variance must be non-negative, got {sigma2}"
        )));
    }
    let mut y = op.forward(s);
    if sigma2 > 0.0 {
        let sd = sigma2.sqrt();
        let mut rng = rng_from_seed(seed);
        for v in &mut y {
            let w: f64 = StandardNormal.sample(&mut rng);
            *v += sd * w;
        }
    }
    Ok(Measurement {
        y,
        sigma2_true: Some(sigma2),
    })
}

/// Relative mismatch `|<Hs, r> - <s, H^T r>| / (||Hs|| ||r|| + ||s|| ||H^T r||)`
/// on one random probe pair.
pub fn adjoint_mismatch(op: &dyn SensingOperator, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let s: Vec<f64> = (0..op.n_coefficients())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let r: Vec<f64> = (0..op.n_measurements())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let hs = op.forward(&s);
    let htr = op.adjoint(&r);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    let lhs = dot(&hs, &r);
    let rhs = dot(&s, &htr);
    (lhs - rhs).abs() / (norm(&hs) * norm(&r) + norm(&s) * norm(&htr))
}
