use nalgebra::DMatrix;
use rand::Rng as _;

use super::{psnr_db, MatrixKind};
use crate::em::{grid_search, EmConfig};
use crate::error::{MpemError, Result};
use crate::hmt::{HmtParams, TreeStructure};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sensing::{simulate_measurements, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Constant,
    /// Overlapping axis-aligned rectangles of random gray levels.
    Blocks,
    /// Regions cut by random straight lines.
    Wedges,
}

impl ImageKind {
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "constant" => Ok(ImageKind::Constant),
            "blocks" => Ok(ImageKind::Blocks),
            "wedges" => Ok(ImageKind::Wedges),
            other => Err(MpemError::Config(format!("unknown image kind {other:?}"))),
        }
    }
}

const BLOCKS: usize = 8;
const WEDGES: usize = 4;

/// Piecewise-constant test image with values in `0..=255`.
pub fn synth_image(kind: ImageKind, rows: usize, cols: usize, seed: u64) -> Result<DMatrix<f64>> {
    if rows == 0 || cols == 0 {
        return Err(MpemError::Dimension("image must be non-empty".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut img = DMatrix::from_element(rows, cols, 128.0);
    match kind {
        ImageKind::Constant => {}
        ImageKind::Blocks => {
            img.fill(rng.random_range(0..=255) as f64);
            for _ in 0..BLOCKS {
                let r0 = rng.random_range(0..rows);
                let c0 = rng.random_range(0..cols);
                let r1 = rng.random_range(r0 + 1..=rows);
                let c1 = rng.random_range(c0 + 1..=cols);
                let level = rng.random_range(0..=255) as f64;
                img.view_mut((r0, c0), (r1 - r0, c1 - c0)).fill(level);
            }
        }
        ImageKind::Wedges => {
            img.fill(rng.random_range(64..=192) as f64);
            for _ in 0..WEDGES {
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let (nr, nc) = (angle.sin(), angle.cos());
                let pr = rng.random::<f64>() * rows as f64;
                let pc = rng.random::<f64>() * cols as f64;
                let step = rng.random_range(-60..=60) as f64;
                for c in 0..cols {
                    for r in 0..rows {
                        if (r as f64 + 0.5 - pr) * nr + (c as f64 + 0.5 - pc) * nc > 0.0 {
                            img[(r, c)] += step;
                        }
                    }
                }
            }
            img.apply(|v| *v = v.clamp(0.0, 255.0));
        }
    }
    Ok(img)
}

#[derive(Debug, Clone)]
pub struct ImageSpec {
    pub levels: usize,
    pub matrix: MatrixKind,
    pub n_over_p: f64,
    /// Measurement noise variance; zero for noiseless samples.
    pub sigma2: f64,
    pub params: HmtParams,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            matrix: MatrixKind::StructurallyRandom,
            n_over_p: 0.35,
            sigma2: 0.0,
            params: HmtParams::default(),
            em: EmConfig {
                record_trace: false,
                ..EmConfig::medium_images()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    /// Reconstruction with the mean added back.
    pub image: DMatrix<f64>,
    pub psnr_db: f64,
    /// PSNR of the all-zero coefficient estimate (the mean image).
    pub zero_psnr_db: f64,
    pub sigma2_selected: f64,
    pub em_iters_total: usize,
    pub unconverged_runs: usize,
    pub n_measurements: usize,
}

/// Compressively samples the Haar coefficients of the mean-subtracted
/// image and reconstructs them with the grid search.
pub fn run_image(img: &DMatrix<f64>, spec: &ImageSpec) -> Result<ImageOutcome> {
    let (rows, cols) = img.shape();
    let psi = Transform::haar(rows, cols, spec.levels)?;
    let tree = TreeStructure::new(rows, cols, spec.levels)?;
    let p = rows * cols;
    let n = (spec.n_over_p * p as f64).round() as usize;
    let mean = img.mean();
    let centered: Vec<f64> = img.iter().map(|v| v - mean).collect();
    let s = psi.analyze(&centered);
    let op = super::build_operator(
        spec.matrix,
        rows,
        cols,
        spec.levels,
        n,
        &psi,
        derive_seed(spec.seed, "matrix", 0),
    )?;
    let y = simulate_measurements(op.as_ref(), &s, spec.sigma2, derive_seed(spec.seed, "noise", 0))?.y;
    let res = grid_search(op.as_ref(), &y, &spec.em, &tree, &spec.params)?;
    let est = &res.estimate().s;
    let finite = |r: Result<f64>| match r {
        Err(MpemError::InfiniteValue) => Ok(f64::INFINITY),
        other => other,
    };
    let psnr = finite(psnr_db(est, &s, &psi))?;
    let zero_psnr = finite(psnr_db(&vec![0.0; p], &s, &psi))?;
    let pixels = psi.synthesize(est);
    let image = DMatrix::from_iterator(rows, cols, pixels.into_iter().map(|v| v + mean));
    Ok(ImageOutcome {
        image,
        psnr_db: psnr,
        zero_psnr_db: zero_psnr,
        sigma2_selected: res.sigma2_selected(),
        em_iters_total: res.total_iterations(),
        unconverged_runs: res.unconverged_runs(),
        n_measurements: n,
    })
}
