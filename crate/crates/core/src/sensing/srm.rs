//! Structurally random sensing operator.
//!
//! `H = R F S Psi`, where `Psi` is the inverse Haar transform, `S` a random
//! +-1 diagonal, `F` an orthonormal fast transform and `R` keeps `N` rows
//! drawn uniformly without replacement. Every factor is orthonormal (or a row
//! selection), so `H H^T = I_N` and the spectral norm is exactly one.
//!
//! `F` is the normalized Walsh-Hadamard transform of the whole image vector
//! when `p` is a power of two and a separable 2-D orthonormal DCT-II
//! otherwise.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;

use super::{SensingOperator, Transform};
use crate::error::{MpemError, Result};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone)]
enum FastTransform {
    Hadamard,
    /// Orthonormal DCT-II matrices for the row and column directions.
    Dct { rows: DMatrix<f64>, cols: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct StructurallyRandomOperator {
    rows: usize,
    cols: usize,
    signs: Vec<f64>,
    picks: Vec<usize>,
    transform: FastTransform,
    psi: Transform,
}

fn dct_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, j| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (PI * (j as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

/// In-place normalized Walsh-Hadamard transform; its own inverse.
fn fwht(x: &mut [f64]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for block in x.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
}

impl StructurallyRandomOperator {
    pub fn new(rows: usize, cols: usize, n: usize, levels: usize, seed: u64) -> Result<Self> {
        let psi = Transform::haar(rows, cols, levels)?;
        let p = rows * cols;
        if n == 0 || n > p {
            return Err(MpemError::Dimension(format!(
                "structurally random operator needs 0 < N <= p, got N = {n}, p = {p}"
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, "srm-signs", 0));
        let signs = (0..p)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut rng = rng_from_seed(derive_seed(seed, "srm-rows", 0));
        let mut picks = index::sample(&mut rng, p, n).into_vec();
        picks.sort_unstable();
        let transform = if p.is_power_of_two() {
            FastTransform::Hadamard
        } else {
            FastTransform::Dct {
                rows: dct_matrix(rows),
                cols: dct_matrix(cols),
            }
        };
        Ok(Self {
            rows,
            cols,
            signs,
            picks,
            transform,
            psi,
        })
    }

    pub fn selected_rows(&self) -> &[usize] {
        &self.picks
    }

    fn apply_fast(&self, x: &mut [f64], transpose: bool) {
        match &self.transform {
            FastTransform::Hadamard => fwht(x),
            FastTransform::Dct { rows, cols } => {
                let img = DMatrix::from_column_slice(self.rows, self.cols, x);
                let out = if transpose {
                    rows.transpose() * img * cols
                } else {
                    rows * img * cols.transpose()
                };
                x.copy_from_slice(out.as_slice());
            }
        }
    }
}

impl SensingOperator for StructurallyRandomOperator {
    fn n_measurements(&self) -> usize {
        self.picks.len()
    }

    fn n_coefficients(&self) -> usize {
        self.signs.len()
    }

    fn forward_into(&self, s: &[f64], out: &mut [f64]) {
        let mut x = self.psi.synthesize(s);
        x.iter_mut().zip(&self.signs).for_each(|(v, g)| *v *= g);
        self.apply_fast(&mut x, false);
        for (o, &k) in out.iter_mut().zip(&self.picks) {
            *o = x[k];
        }
    }

    fn adjoint_into(&self, r: &[f64], out: &mut [f64]) {
        let mut x = vec![0.0; self.signs.len()];
        for (&v, &k) in r.iter().zip(&self.picks) {
            x[k] = v;
        }
        self.apply_fast(&mut x, true);
        x.iter_mut().zip(&self.signs).for_each(|(v, g)| *v *= g);
        out.copy_from_slice(&self.psi.analyze(&x));
    }

    fn spectral_norm_certificate(&self) -> f64 {
        1.0
    }
}
