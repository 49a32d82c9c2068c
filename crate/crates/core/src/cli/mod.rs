//! The `mpem` command line: `simulate`, `reconstruct`, `sweep` and `image`.
//!
//! Exit codes: 0 success, 1 finished with warnings (an EM run hit its
//! iteration cap or a trial failed), 2 I/O error, 3 invalid input.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub use config::{Command, RawConfig, RunConfig, KEYS};

use crate::em::{grid_search, log_marginal_posterior, run_em, GridPoint, GridSearchResult};
use crate::error::{MpemError, Result};
use crate::experiments::{
    aggregate, aggregate_csv, build_operator, nmse, psnr_db, results_csv, run_image, run_sweep,
    synth_image, ImageSpec, MatrixKind, TrialResult, TrialSpec,
};
use crate::hmt::{sample_prior, TreeStructure};
use crate::rng::derive_seed;
use crate::sensing::io::{read_matrix, read_pgm, read_vector, to_gray, write_pgm, write_vector};
use crate::sensing::{
    scale_to_unit_spectral_norm, simulate_measurements, SensingOperator, Transform,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_WARNING: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_INVALID: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mpem", version, about = "Compressive sampling reconstruction with hidden Markov tree priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Draw a sampling matrix, a signal from the prior and noisy measurements.
    Simulate(Flags),
    /// Reconstruct from saved measurements (e.g. a simulate manifest).
    Reconstruct(Flags),
    /// Monte Carlo sweep over N/p and gamma2_star.
    Sweep(Flags),
    /// Compressively sample and reconstruct a synthetic or PGM image.
    Image(Flags),
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Run EM once at this sigma^2 instead of the grid search.
    #[arg(long, value_name = "FLOAT")]
    pub sigma2_fixed: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub grid_k: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    pub grid_d: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    pub delta: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub trials: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Flags {
    fn load(&self, cmd: Command) -> Result<RunConfig> {
        let mut raw = match &self.config {
            Some(path) => {
                require_file(path)?;
                RawConfig::load(path)?
            }
            None => RawConfig::default(),
        };
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("sigma2_fixed", self.sigma2_fixed.map(|v| v.to_string())),
            ("grid_k", self.grid_k.map(|v| v.to_string())),
            ("grid_d", self.grid_d.map(|v| v.to_string())),
            ("delta", self.delta.map(|v| v.to_string())),
            ("trials", self.trials.map(|v| v.to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                raw.set(k, v)?;
            }
        }
        let mut cfg = RunConfig::from_raw(&raw, cmd)?;
        if let Some(out) = &self.out {
            cfg.out.clone_from(out);
        }
        Ok(cfg)
    }
}

/// Exit code for an error.
pub fn exit_code(err: &MpemError) -> u8 {
    match err {
        MpemError::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let keys = config_help();
    let command = Cli::command()
        .mut_subcommands(|sub| sub.after_long_help(keys.clone()));
    let parsed = command
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn config_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config file keys (command-line flags take precedence):\n");
    for (k, doc) in KEYS {
        let _ = writeln!(out, "  {k:width$}  {doc}");
    }
    out
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Cmd::Simulate(f) => cmd_simulate(&f.load(Command::Simulate)?),
        Cmd::Reconstruct(f) => cmd_reconstruct(&f.load(Command::Reconstruct)?),
        Cmd::Sweep(f) => cmd_sweep(&f.load(Command::Sweep)?),
        Cmd::Image(f) => cmd_image(&f.load(Command::Image)?),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MpemError::format(path, "file not found"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MpemError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MpemError::io(path, e))
}

fn q_csv(q: &[bool]) -> String {
    let mut out = String::from("index,q\n");
    for (i, &v) in q.iter().enumerate() {
        writeln!(out, "{i},{}", u8::from(v)).unwrap();
    }
    out
}

fn read_q(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| MpemError::io(path, e))?;
    let mut q = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let field = line.rsplit(',').next().unwrap_or("").trim();
        match field {
            "0" => q.push(false),
            "1" => q.push(true),
            _ => return Err(MpemError::format(path, format!("line {}: expected 0 or 1", n + 1))),
        }
    }
    Ok(q)
}

/// Synthesis transform paired with a matrix kind.
fn psi_for(kind: MatrixKind, cfg: &RunConfig) -> Result<Transform> {
    match kind {
        MatrixKind::StructurallyRandom => Transform::haar(cfg.rows, cfg.cols, cfg.levels),
        _ => Ok(Transform::Identity),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<u8> {
    let tree = TreeStructure::new(cfg.rows, cfg.cols, cfg.levels)?;
    let matrix_seed = cfg
        .matrix_seed
        .unwrap_or_else(|| derive_seed(cfg.seed, "matrix", 0));
    let psi = psi_for(cfg.matrix, cfg)?;
    let op = build_operator(cfg.matrix, cfg.rows, cfg.cols, cfg.levels, cfg.n(), &psi, matrix_seed)?;
    let truth = sample_prior(
        &tree,
        &cfg.model,
        cfg.signal_sigma2,
        derive_seed(cfg.seed, "signal", 0),
    )?;
    let y = simulate_measurements(
        op.as_ref(),
        &truth.s,
        cfg.sigma2_star,
        derive_seed(cfg.seed, "noise", 0),
    )?
    .y;

    let out = &cfg.out;
    create_dir(out)?;
    let mut files = Vec::new();
    if let Some(h) = op.dense() {
        crate::sensing::io::write_matrix(out.join("h.bin"), h)?;
        files.push(("h", "h.bin"));
    }
    write_vector(out.join("y.bin"), &y)?;
    write_vector(out.join("s_true.bin"), &truth.s)?;
    write_text(&out.join("q_true.csv"), &q_csv(&truth.q))?;
    files.extend([("y", "y.bin"), ("s_true", "s_true.bin"), ("q_true", "q_true.csv")]);
    let manifest = RunConfig {
        matrix_seed: Some(matrix_seed),
        ..cfg.clone()
    }
    .manifest(&files);
    write_text(&out.join("manifest.txt"), &manifest)?;
    println!(
        "simulated p={} N={} high={} into {}",
        tree.len(),
        y.len(),
        truth.high_count(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Operator and measurements of a reconstruct run, with `H` at unit norm.
struct Loaded {
    op: Box<dyn SensingOperator>,
    y: Vec<f64>,
    psi: Transform,
    /// Factor the file matrix and `y` were divided by.
    scale: f64,
}

fn load_problem(cfg: &RunConfig) -> Result<Loaded> {
    let y_path = cfg.y.as_ref().expect("validated");
    require_file(y_path)?;
    let y = read_vector(y_path)?;
    let p = cfg.rows * cfg.cols;
    match &cfg.h {
        Some(h_path) => {
            require_file(h_path)?;
            let h = read_matrix(h_path)?;
            if h.ncols() != p {
                return Err(MpemError::format(
                    h_path,
                    format!("matrix has {} columns but the grid has {p} coefficients", h.ncols()),
                ));
            }
            if h.nrows() != y.len() {
                return Err(MpemError::format(
                    y_path,
                    format!("{} measurements but the matrix has {} rows", y.len(), h.nrows()),
                ));
            }
            let scaled = scale_to_unit_spectral_norm(&h, &Transform::Identity, &y, 0.0)?;
            Ok(Loaded {
                op: Box::new(scaled.operator),
                y: scaled.y,
                psi: Transform::Identity,
                scale: scaled.phi_norm,
            })
        }
        None => {
            let seed = cfg.matrix_seed.ok_or_else(|| {
                MpemError::Config("reconstruct needs h or matrix_seed".into())
            })?;
            let psi = psi_for(cfg.matrix, cfg)?;
            let op = build_operator(cfg.matrix, cfg.rows, cfg.cols, cfg.levels, y.len(), &psi, seed)?;
            Ok(Loaded {
                op,
                y,
                psi,
                scale: 1.0,
            })
        }
    }
}

pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<u8> {
    let tree = TreeStructure::new(cfg.rows, cfg.cols, cfg.levels)?;
    let loaded = load_problem(cfg)?;
    let (op, y) = (loaded.op.as_ref(), &loaded.y);
    let p = tree.len();
    let s_true = match &cfg.s_true {
        Some(path) => {
            require_file(path)?;
            let s = read_vector(path)?;
            if s.len() != p {
                return Err(MpemError::format(
                    path,
                    format!("{} coefficients but the grid has {p}", s.len()),
                ));
            }
            Some(s)
        }
        None => None,
    };
    let q_true = match &cfg.q_true {
        Some(path) => {
            require_file(path)?;
            let q = read_q(path)?;
            if q.len() != p {
                return Err(MpemError::format(path, format!("{} states but the grid has {p}", q.len())));
            }
            Some(q)
        }
        None => None,
    };

    let unit = loaded.scale * loaded.scale;
    let mut res = match cfg.sigma2_fixed {
        Some(sigma2) => {
            let run = run_em(op, y, sigma2 / unit, &vec![0.0; p], &cfg.em, &tree, &cfg.algo)?;
            let log_marginal = log_marginal_posterior(&run.estimate, op, y, &tree, &cfg.algo)?;
            GridSearchResult {
                points: vec![GridPoint {
                    sigma2: run.sigma2,
                    log_marginal,
                    iterations: run.iterations,
                    converged: run.converged,
                    estimate: run.estimate,
                    trace: run.trace,
                }],
                selected: 0,
            }
        }
        None => grid_search(op, y, &cfg.em, &tree, &cfg.algo)?,
    };
    // report variances in the units of the input files
    for g in &mut res.points {
        g.sigma2 *= unit;
    }

    let out = &cfg.out;
    create_dir(out)?;
    let est = res.estimate();
    write_vector(out.join("s_hat.bin"), &est.s)?;
    write_text(&out.join("q_hat.csv"), &q_csv(&est.q))?;
    write_text(&out.join("grid.csv"), &res.grid_csv())?;
    if cfg.em.record_trace {
        write_text(&out.join("em_iterations.csv"), &res.iteration_csv())?;
    }

    let mut summary = String::new();
    writeln!(summary, "sigma2_selected = {:e}", res.sigma2_selected()).unwrap();
    writeln!(summary, "high_states = {}", est.high_count()).unwrap();
    writeln!(summary, "em_iters_total = {}", res.total_iterations()).unwrap();
    writeln!(summary, "unconverged_runs = {}", res.unconverged_runs()).unwrap();
    if (loaded.scale - 1.0).abs() > 1e-9 {
        writeln!(summary, "matrix_norm = {:e}", loaded.scale).unwrap();
    }
    if let Some(s) = &s_true {
        writeln!(summary, "nmse = {:e}", nmse(&est.s, s)?).unwrap();
        match psnr_db(&est.s, s, &loaded.psi) {
            Ok(v) => writeln!(summary, "psnr_db = {v}").unwrap(),
            Err(MpemError::InfiniteValue) => writeln!(summary, "psnr_db = inf").unwrap(),
            Err(e) => return Err(e),
        }
    }
    if let Some(q) = &q_true {
        let wrong = q.iter().zip(&est.q).filter(|(a, b)| a != b).count();
        writeln!(summary, "state_errors = {wrong}").unwrap();
    }
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(warn_unconverged(res.unconverged_runs()))
}

fn warn_unconverged(count: usize) -> u8 {
    if count > 0 {
        eprintln!("warning: {count} EM run(s) stopped at max_iters");
        EXIT_WARNING
    } else {
        EXIT_OK
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<u8> {
    if cfg.sigma2_fixed.is_some() {
        return Err(MpemError::Config("sigma2_fixed is not used by sweep".into()));
    }
    let out = &cfg.out;
    create_dir(out)?;
    let progress = |r: &TrialResult| match &r.error {
        None => println!(
            "trial {} N/p={} gamma2*={:e} nmse={:.4e} iters={} ms={}",
            r.trial, r.n_over_p, r.gamma2_star, r.nmse, r.em_iters_total, r.wall_ms
        ),
        Some(e) => println!(
            "trial {} N/p={} gamma2*={:e} failed: {e}",
            r.trial, r.n_over_p, r.gamma2_star
        ),
    };
    let mut results = Vec::new();
    for &gamma2 in &cfg.model_gamma2 {
        for &ratio in &cfg.n_over_p {
            let spec = TrialSpec {
                rows: cfg.rows,
                cols: cfg.cols,
                levels: cfg.levels,
                matrix: cfg.matrix,
                n_over_p: ratio,
                model: crate::hmt::HmtParams { gamma2, ..cfg.model },
                sigma2_star: cfg.sigma2_star,
                algo: cfg.algo,
                em: cfg.em,
                master_seed: cfg.seed,
                n_trials: cfg.trials,
                baselines: cfg.baselines,
                timing: cfg.timing,
            };
            results.extend(run_sweep(&spec, cfg.threads, Some(&progress))?);
        }
    }
    write_text(&out.join("results.csv"), &results_csv(&results))?;
    let agg = aggregate_csv(&aggregate(&results));
    write_text(&out.join("aggregate.csv"), &agg)?;
    print!("{agg}");
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} trial(s) failed");
        return Ok(EXIT_WARNING);
    }
    Ok(warn_unconverged(results.iter().map(|r| r.unconverged_runs).sum()))
}

pub fn cmd_image(cfg: &RunConfig) -> Result<u8> {
    if cfg.sigma2_fixed.is_some() {
        return Err(MpemError::Config("sigma2_fixed is not used by image".into()));
    }
    let img = match &cfg.image_path {
        Some(path) => {
            require_file(path)?;
            read_pgm(path)?.map(f64::from)
        }
        None => synth_image(cfg.image_kind, cfg.rows, cfg.cols, derive_seed(cfg.seed, "image", 0))?,
    };
    let spec = ImageSpec {
        levels: cfg.levels,
        matrix: cfg.matrix,
        n_over_p: cfg.n_over_p[0],
        sigma2: cfg.sigma2_star,
        params: cfg.algo,
        em: cfg.em,
        seed: cfg.seed,
    };
    let outcome = run_image(&img, &spec)?;
    let out = &cfg.out;
    create_dir(out)?;
    write_pgm(out.join("original.pgm"), &to_gray(&img))?;
    write_pgm(out.join("reconstruction.pgm"), &to_gray(&outcome.image))?;
    let mut metrics = String::new();
    writeln!(metrics, "rows = {}", img.nrows()).unwrap();
    writeln!(metrics, "cols = {}", img.ncols()).unwrap();
    writeln!(metrics, "n_measurements = {}", outcome.n_measurements).unwrap();
    writeln!(metrics, "psnr_db = {}", outcome.psnr_db).unwrap();
    writeln!(metrics, "zero_estimate_psnr_db = {}", outcome.zero_psnr_db).unwrap();
    writeln!(metrics, "sigma2_selected = {:e}", outcome.sigma2_selected).unwrap();
    writeln!(metrics, "em_iters_total = {}", outcome.em_iters_total).unwrap();
    writeln!(metrics, "unconverged_runs = {}", outcome.unconverged_runs).unwrap();
    write_text(&out.join("metrics.txt"), &metrics)?;
    print!("{metrics}");
    Ok(warn_unconverged(outcome.unconverged_runs))
}
