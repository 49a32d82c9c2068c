//! Gaussian sampling-matrix families.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MpemError, Result};
use crate::rng::{rng_from_seed, Rng};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_shape(n: usize, p: usize) -> Result<()> {
    if n == 0 || p == 0 || n > p {
        return Err(MpemError::Dimension(format!(
            "sampling matrix needs 0 < N <= p, got N = {n}, p = {p}"
        )));
    }
    Ok(())
}

fn check_corr(r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(MpemError::Range(format!("correlation {r} outside [0, 1)")));
    }
    Ok(())
}

/// `N x p` matrix with iid standard normal entries.
pub fn gen_white_gaussian(n: usize, p: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_shape(n, p)?;
    let mut rng = rng_from_seed(seed);
    // Column-major fill: one column after another.
    Ok(DMatrix::from_fn(n, p, |_, _| normal(&mut rng)))
}

/// Iid columns, each an AR(1) sequence down the rows:
/// `cov(phi[i,k], phi[j,k]) = r^|i-j|`.
pub fn gen_row_correlated(n: usize, p: usize, r: f64, seed: u64) -> Result<DMatrix<f64>> {
    check_shape(n, p)?;
    check_corr(r)?;
    let mut rng = rng_from_seed(seed);
    let innov = (1.0 - r * r).sqrt();
    let mut m = DMatrix::zeros(n, p);
    for k in 0..p {
        let mut col = m.column_mut(k);
        col[0] = normal(&mut rng);
        for i in 1..n {
            col[i] = r * col[i - 1] + innov * normal(&mut rng);
        }
    }
    Ok(m)
}

/// Iid rows, each an AR(1) sequence across the columns:
/// `cov(phi[k,i], phi[k,j]) = c^|i-j|`.
pub fn gen_col_correlated(n: usize, p: usize, c: f64, seed: u64) -> Result<DMatrix<f64>> {
    check_shape(n, p)?;
    check_corr(c)?;
    let mut rng = rng_from_seed(seed);
    let innov = (1.0 - c * c).sqrt();
    let mut m = DMatrix::zeros(n, p);
    for k in 0..n {
        m[(k, 0)] = normal(&mut rng);
        for j in 1..p {
            m[(k, j)] = c * m[(k, j - 1)] + innov * normal(&mut rng);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(m: &DMatrix<f64>) -> (f64, f64) {
        let n = m.len() as f64;
        let mean = m.iter().sum::<f64>() / n;
        let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    /// Lag-`lag` autocorrelation down columns.
    fn column_lag_corr(m: &DMatrix<f64>, lag: usize) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..m.ncols() {
            for i in lag..m.nrows() {
                num += m[(i, k)] * m[(i - lag, k)];
            }
            for i in 0..m.nrows() {
                den += m[(i, k)] * m[(i, k)];
            }
        }
        num / (m.ncols() * (m.nrows() - lag)) as f64 / (den / m.len() as f64)
    }

    #[test]
    fn white_moments_and_determinism() {
        let a = gen_white_gaussian(100, 1000, 3).unwrap();
        let (mean, var) = mean_var(&a);
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        assert_eq!(a, gen_white_gaussian(100, 1000, 3).unwrap());
        assert_ne!(a, gen_white_gaussian(100, 1000, 4).unwrap());
    }

    #[test]
    fn row_correlation_lags() {
        let m = gen_row_correlated(100, 1010, 0.2, 8).unwrap();
        let c1 = column_lag_corr(&m, 1);
        assert!((c1 - 0.2).abs() < 0.02, "{c1}");

        let m = gen_row_correlated(100, 1100, 0.3, 9).unwrap();
        let c2 = column_lag_corr(&m, 2);
        assert!((c2 - 0.09).abs() < 0.02, "{c2}");

        let m = gen_row_correlated(100, 1000, 0.0, 10).unwrap();
        let (mean, var) = mean_var(&m);
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
        assert!(column_lag_corr(&m, 1).abs() < 0.02);
    }

    #[test]
    fn column_correlation_is_transposed_row_law() {
        let m = gen_col_correlated(1010, 1020, 0.2, 12).unwrap();
        let t = m.transpose();
        let c1 = column_lag_corr(&t, 1);
        assert!((c1 - 0.2).abs() < 0.02, "{c1}");

        let other = gen_row_correlated(1020, 1030, 0.2, 13).unwrap();
        let (m_mean, m_var) = mean_var(&m);
        let (o_mean, o_var) = mean_var(&other);
        assert!((m_mean - o_mean).abs() < 0.02);
        assert!((m_var - o_var).abs() < 0.03);
        assert!((column_lag_corr(&other, 1) - c1).abs() < 0.02);

        let white = gen_col_correlated(100, 1000, 0.0, 14).unwrap();
        let (mean, var) = mean_var(&white);
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(gen_row_correlated(4, 8, 1.0, 0), Err(MpemError::Range(_))));
        assert!(matches!(gen_col_correlated(4, 8, -0.1, 0), Err(MpemError::Range(_))));
        assert!(matches!(gen_white_gaussian(9, 8, 0), Err(MpemError::Dimension(_))));
    }
}
