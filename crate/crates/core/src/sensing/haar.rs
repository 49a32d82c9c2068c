//! Orthonormal 2-D Haar transform in the Mallat layout.
//!
//! Each level splits the current top-left block horizontally (low half
//! left, high half right) and then vertically (low half top). The
//! approximation after `L` levels occupies the top-left
//! `rows/2^L x cols/2^L` block.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;

use crate::error::{MpemError, Result};

fn check_dims(rows: usize, cols: usize, levels: usize) -> Result<()> {
    if levels >= usize::BITS as usize {
        return Err(MpemError::Dimension(format!("{levels} levels is too deep")));
    }
    let block = 1usize << levels;
    if rows == 0 || cols == 0 || !rows.is_multiple_of(block) || !cols.is_multiple_of(block) {
        return Err(MpemError::Dimension(format!(
            "{rows}x{cols} is not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

fn split_rows(m: &mut DMatrix<f64>, h: usize, w: usize, buf: &mut Vec<f64>) {
    let half = w / 2;
    for r in 0..h {
        buf.clear();
        buf.extend((0..w).map(|c| m[(r, c)]));
        for j in 0..half {
            let (a, b) = (buf[2 * j], buf[2 * j + 1]);
            m[(r, j)] = (a + b) * FRAC_1_SQRT_2;
            m[(r, half + j)] = (a - b) * FRAC_1_SQRT_2;
        }
    }
}

fn merge_rows(m: &mut DMatrix<f64>, h: usize, w: usize, buf: &mut Vec<f64>) {
    let half = w / 2;
    for r in 0..h {
        buf.clear();
        buf.extend((0..w).map(|c| m[(r, c)]));
        for j in 0..half {
            let (lo, hi) = (buf[j], buf[half + j]);
            m[(r, 2 * j)] = (lo + hi) * FRAC_1_SQRT_2;
            m[(r, 2 * j + 1)] = (lo - hi) * FRAC_1_SQRT_2;
        }
    }
}

fn split_cols(m: &mut DMatrix<f64>, h: usize, w: usize, buf: &mut Vec<f64>) {
    let half = h / 2;
    for c in 0..w {
        let col = &mut m.column_mut(c);
        buf.clear();
        buf.extend((0..h).map(|r| col[r]));
        for j in 0..half {
            let (a, b) = (buf[2 * j], buf[2 * j + 1]);
            col[j] = (a + b) * FRAC_1_SQRT_2;
            col[half + j] = (a - b) * FRAC_1_SQRT_2;
        }
    }
}

fn merge_cols(m: &mut DMatrix<f64>, h: usize, w: usize, buf: &mut Vec<f64>) {
    let half = h / 2;
    for c in 0..w {
        let col = &mut m.column_mut(c);
        buf.clear();
        buf.extend((0..h).map(|r| col[r]));
        for j in 0..half {
            let (lo, hi) = (buf[j], buf[half + j]);
            col[2 * j] = (lo + hi) * FRAC_1_SQRT_2;
            col[2 * j + 1] = (lo - hi) * FRAC_1_SQRT_2;
        }
    }
}

/// Forward (analysis) transform: image to coefficients.
pub fn haar_dwt2(image: &DMatrix<f64>, levels: usize) -> Result<DMatrix<f64>> {
    let (rows, cols) = image.shape();
    check_dims(rows, cols, levels)?;
    let mut m = image.clone();
    let mut buf = Vec::with_capacity(rows.max(cols));
    for k in 0..levels {
        let (h, w) = (rows >> k, cols >> k);
        split_rows(&mut m, h, w, &mut buf);
        split_cols(&mut m, h, w, &mut buf);
    }
    Ok(m)
}

/// Inverse (synthesis) transform: coefficients to image.
pub fn haar_idwt2(coeffs: &DMatrix<f64>, levels: usize) -> Result<DMatrix<f64>> {
    let (rows, cols) = coeffs.shape();
    check_dims(rows, cols, levels)?;
    let mut m = coeffs.clone();
    let mut buf = Vec::with_capacity(rows.max(cols));
    for k in (0..levels).rev() {
        let (h, w) = (rows >> k, cols >> k);
        merge_cols(&mut m, h, w, &mut buf);
        merge_rows(&mut m, h, w, &mut buf);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_image(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn two_by_two_butterflies() {
        let (a, b, c, d) = (1.0, 5.0, -2.0, 7.5);
        let img = DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
        let w = haar_dwt2(&img, 1).unwrap();
        let expect = [
            (a + b + c + d) / 2.0,
            (a - b + c - d) / 2.0,
            (a + b - c - d) / 2.0,
            (a - b - c + d) / 2.0,
        ];
        let got = [w[(0, 0)], w[(0, 1)], w[(1, 0)], w[(1, 1)]];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_image_has_only_approximation() {
        let v = 3.25;
        for levels in 1..=3 {
            let img = DMatrix::from_element(16, 8, v);
            let w = haar_dwt2(&img, levels).unwrap();
            let (ar, ac) = (16 >> levels, 8 >> levels);
            for c in 0..8 {
                for r in 0..16 {
                    let expect = if r < ar && c < ac {
                        v * f64::from(1u32 << levels)
                    } else {
                        0.0
                    };
                    assert!((w[(r, c)] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        for (rows, cols, levels, seed) in [(8, 8, 3, 1), (32, 64, 4, 2), (256, 256, 4, 3), (48, 16, 4, 4)] {
            let x = random_image(rows, cols, seed);
            let w = haar_dwt2(&x, levels).unwrap();
            assert!((w.norm() - x.norm()).abs() < 1e-10);
            let back = haar_idwt2(&w, levels).unwrap();
            assert!((back - &x).amax() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let x = DMatrix::zeros(12, 8);
        assert!(matches!(haar_dwt2(&x, 3), Err(MpemError::Dimension(_))));
        assert!(matches!(haar_idwt2(&x, 3), Err(MpemError::Dimension(_))));
    }
}
