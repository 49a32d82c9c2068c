//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones; command-line flags override the file. Relative paths are
//! resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::em::EmConfig;
use crate::error::{MpemError, Result};
use crate::experiments::{ImageKind, MatrixKind};
use crate::hmt::HmtParams;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("rows", "coefficient grid rows (default 32, image 64)"),
    ("cols", "coefficient grid columns (default 32, image 64)"),
    ("levels", "wavelet decomposition levels L (default 4)"),
    ("matrix", "white | row_corr | col_corr | structurally_random"),
    ("corr", "correlation coefficient of the correlated kinds"),
    ("matrix_seed", "seed of the sampling matrix (set by simulate)"),
    ("n_over_p", "N/p; sweep accepts a comma-separated list"),
    ("gamma2", "reconstruction gamma^2 (default 1000)"),
    ("eps2", "reconstruction eps^2 (default 0.1)"),
    ("p_root", "reconstruction root high probability (default 0.2)"),
    ("p_high", "reconstruction P_H (default 0.2)"),
    ("p_low", "reconstruction P_L (default 1e-5)"),
    ("model_gamma2", "simulation gamma^2; sweep accepts a list (default 1e4)"),
    ("model_eps2", "simulation eps^2 (default 1)"),
    ("model_p_root", "simulation root high probability (default 0.5)"),
    ("model_p_high", "simulation P_H (default 0.5)"),
    ("model_p_low", "simulation P_L (default 1e-4)"),
    ("sigma2_star", "simulated noise variance (default 1e-6, image 0)"),
    ("signal_sigma2", "variance scale of simulated coefficients (default sigma2_star, or 1e-6 if that is 0)"),
    ("delta", "EM convergence threshold (default 1e-10, image 0.01)"),
    ("max_iters", "EM iteration cap per grid point (default 2000)"),
    ("grid_k", "number of sigma^2 grid points (default 16)"),
    ("grid_d", "grid ratio (default 2)"),
    ("refine_steps", "bisection rounds around the selected grid point (default 0)"),
    ("record_trace", "keep per-iteration posterior traces (default true, sweep and image false)"),
    ("sigma2_fixed", "skip the grid search and run EM once at this sigma^2"),
    ("seed", "master seed (default 0)"),
    ("trials", "Monte Carlo trials per sweep point (default 50)"),
    ("threads", "sweep workers, 0 = all cores (default 0)"),
    ("timing", "record wall-clock times in sweep output (default true)"),
    ("baselines", "compute genie and all-high baselines (default true)"),
    ("image_kind", "constant | blocks | wedges (default blocks)"),
    ("image_path", "PGM image to reconstruct instead of a synthetic one"),
    ("h", "sensing matrix file for reconstruct"),
    ("y", "measurement vector file for reconstruct"),
    ("s_true", "optional ground-truth coefficients for reconstruct"),
    ("q_true", "optional ground-truth states for reconstruct"),
    ("out", "output directory (default mpem_out)"),
];

/// Raw key-value pairs plus the directory relative paths refer to.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
    base: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg = RawConfig {
            entries: BTreeMap::new(),
            base: base.into(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MpemError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MpemError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(MpemError::Config(format!("unknown key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| MpemError::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| MpemError::Config(format!("{key}: cannot parse {x:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(MpemError::Config(format!("{key}: expected true or false, got {v:?}"))),
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }
}

/// Which command the defaults are chosen for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Reconstruct,
    Sweep,
    Image,
}

/// Typed configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    pub matrix: MatrixKind,
    pub matrix_seed: Option<u64>,
    pub n_over_p: Vec<f64>,
    pub algo: HmtParams,
    pub model: HmtParams,
    pub model_gamma2: Vec<f64>,
    pub sigma2_star: f64,
    pub signal_sigma2: f64,
    pub em: EmConfig,
    pub sigma2_fixed: Option<f64>,
    pub seed: u64,
    pub trials: usize,
    pub threads: usize,
    pub timing: bool,
    pub baselines: bool,
    pub image_kind: ImageKind,
    pub image_path: Option<PathBuf>,
    pub h: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub s_true: Option<PathBuf>,
    pub q_true: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig, cmd: Command) -> Result<Self> {
        let image = cmd == Command::Image;
        let size = if image { 64 } else { 32 };
        let corr = raw.num::<f64>("corr")?.unwrap_or(0.0);
        let matrix = match raw.get("matrix") {
            Some(label) => MatrixKind::parse(label, corr)?,
            None if image => MatrixKind::StructurallyRandom,
            None => MatrixKind::White,
        };
        let tuning = HmtParams::default();
        let algo = HmtParams {
            gamma2: raw.num("gamma2")?.unwrap_or(tuning.gamma2),
            eps2: raw.num("eps2")?.unwrap_or(tuning.eps2),
            p_root: raw.num("p_root")?.unwrap_or(tuning.p_root),
            p_high: raw.num("p_high")?.unwrap_or(tuning.p_high),
            p_low: raw.num("p_low")?.unwrap_or(tuning.p_low),
        };
        let model_gamma2 = raw.list("model_gamma2")?.unwrap_or_else(|| vec![1e4]);
        if model_gamma2.is_empty() {
            return Err(MpemError::Config("model_gamma2 is empty".into()));
        }
        let model = HmtParams {
            gamma2: model_gamma2[0],
            eps2: raw.num("model_eps2")?.unwrap_or(1.0),
            p_root: raw.num("model_p_root")?.unwrap_or(0.5),
            p_high: raw.num("model_p_high")?.unwrap_or(0.5),
            p_low: raw.num("model_p_low")?.unwrap_or(1e-4),
        };
        let base_em = if image {
            EmConfig::medium_images()
        } else {
            EmConfig::small_scale()
        };
        let em = EmConfig {
            delta: raw.num("delta")?.unwrap_or(base_em.delta),
            max_iters: raw.num("max_iters")?.unwrap_or(base_em.max_iters),
            grid_k: raw.num("grid_k")?.unwrap_or(base_em.grid_k),
            grid_d: raw.num("grid_d")?.unwrap_or(base_em.grid_d),
            refine_steps: raw.num("refine_steps")?.unwrap_or(base_em.refine_steps),
            record_trace: raw
                .flag("record_trace")?
                .unwrap_or(!matches!(cmd, Command::Sweep | Command::Image)),
        };
        let sigma2_star = raw
            .num("sigma2_star")?
            .unwrap_or(if image { 0.0 } else { 1e-6 });
        let signal_sigma2 = raw
            .num("signal_sigma2")?
            .unwrap_or(if sigma2_star > 0.0 { sigma2_star } else { 1e-6 });
        let image_kind = match raw.get("image_kind") {
            Some(k) => ImageKind::parse(k)?,
            None => ImageKind::Blocks,
        };
        let cfg = RunConfig {
            rows: raw.num("rows")?.unwrap_or(size),
            cols: raw.num("cols")?.unwrap_or(size),
            levels: raw.num("levels")?.unwrap_or(4),
            matrix,
            matrix_seed: raw.num("matrix_seed")?,
            n_over_p: raw
                .list("n_over_p")?
                .unwrap_or_else(|| vec![if image { 0.35 } else { 0.4 }]),
            algo,
            model,
            model_gamma2,
            sigma2_star,
            signal_sigma2,
            em,
            sigma2_fixed: raw.num("sigma2_fixed")?,
            seed: raw.num("seed")?.unwrap_or(0),
            trials: raw.num("trials")?.unwrap_or(50),
            threads: raw.num("threads")?.unwrap_or(0),
            timing: raw.flag("timing")?.unwrap_or(true),
            baselines: raw.flag("baselines")?.unwrap_or(true),
            image_kind,
            image_path: raw.path("image_path"),
            h: raw.path("h"),
            y: raw.path("y"),
            s_true: raw.path("s_true"),
            q_true: raw.path("q_true"),
            out: raw
                .get("out")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("mpem_out")),
        };
        cfg.validate(cmd)?;
        Ok(cfg)
    }

    fn validate(&self, cmd: Command) -> Result<()> {
        self.algo.validate()?;
        self.em.validate()?;
        if self.n_over_p.is_empty() {
            return Err(MpemError::Config("n_over_p is empty".into()));
        }
        if cmd != Command::Sweep && (self.n_over_p.len() > 1 || self.model_gamma2.len() > 1) {
            return Err(MpemError::Config(
                "lists for n_over_p and model_gamma2 are only accepted by sweep".into(),
            ));
        }
        for &r in &self.n_over_p {
            if !(r > 0.0 && r <= 1.0) {
                return Err(MpemError::Config(format!("n_over_p must lie in (0, 1], got {r}")));
            }
        }
        for &g in &self.model_gamma2 {
            HmtParams { gamma2: g, ..self.model }.validate()?;
        }
        if !(self.sigma2_star >= 0.0 && self.sigma2_star.is_finite()) {
            return Err(MpemError::Config("sigma2_star must be non-negative".into()));
        }
        if !(self.signal_sigma2 > 0.0 && self.signal_sigma2.is_finite()) {
            return Err(MpemError::Config("signal_sigma2 must be positive".into()));
        }
        if cmd == Command::Sweep && self.sigma2_star == 0.0 {
            return Err(MpemError::Config("sweep needs sigma2_star > 0".into()));
        }
        if let Some(s) = self.sigma2_fixed {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MpemError::Config(format!("sigma2_fixed must be positive, got {s}")));
            }
        }
        if cmd == Command::Reconstruct && self.y.is_none() {
            return Err(MpemError::Config("reconstruct needs y".into()));
        }
        Ok(())
    }

    /// Problem size `N` for the first `n_over_p`.
    pub fn n(&self) -> usize {
        (self.n_over_p[0] * (self.rows * self.cols) as f64).round() as usize
    }

    /// Config text reproducing this run. File keys are written as given.
    pub fn manifest(&self, files: &[(&str, &str)]) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("rows", self.rows.to_string());
        kv("cols", self.cols.to_string());
        kv("levels", self.levels.to_string());
        kv("matrix", self.matrix.label().to_string());
        kv("corr", format!("{:e}", self.matrix.correlation()));
        if let Some(s) = self.matrix_seed {
            kv("matrix_seed", s.to_string());
        }
        kv("n_over_p", join(&self.n_over_p));
        kv("gamma2", format!("{:e}", self.algo.gamma2));
        kv("eps2", format!("{:e}", self.algo.eps2));
        kv("p_root", format!("{:e}", self.algo.p_root));
        kv("p_high", format!("{:e}", self.algo.p_high));
        kv("p_low", format!("{:e}", self.algo.p_low));
        kv("model_gamma2", join(&self.model_gamma2));
        kv("model_eps2", format!("{:e}", self.model.eps2));
        kv("model_p_root", format!("{:e}", self.model.p_root));
        kv("model_p_high", format!("{:e}", self.model.p_high));
        kv("model_p_low", format!("{:e}", self.model.p_low));
        kv("sigma2_star", format!("{:e}", self.sigma2_star));
        kv("signal_sigma2", format!("{:e}", self.signal_sigma2));
        kv("delta", format!("{:e}", self.em.delta));
        kv("max_iters", self.em.max_iters.to_string());
        kv("grid_k", self.em.grid_k.to_string());
        kv("grid_d", format!("{:e}", self.em.grid_d));
        kv("refine_steps", self.em.refine_steps.to_string());
        kv("record_trace", self.em.record_trace.to_string());
        if let Some(s) = self.sigma2_fixed {
            kv("sigma2_fixed", format!("{s:e}"));
        }
        kv("seed", self.seed.to_string());
        for (k, v) in files {
            kv(k, v.to_string());
        }
        out
    }
}
