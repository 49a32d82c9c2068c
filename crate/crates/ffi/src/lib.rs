//! C ABI for `mpem`.
//!
//! Objects cross the boundary as opaque handles created by `mpem_*_new`
//! style functions and released with the matching `*_free`. Fallible calls
//! return an [`MpemStatus`]; on failure a message is kept per thread and can
//! be read with [`mpem_last_error_message`]. Matrices are row-major, vectors
//! follow the columnwise coefficient order of the library.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::DMatrix;

use mpem::em::{
    grid_search, log_marginal_posterior, run_em, EmConfig, GridPoint, GridSearchResult,
};
use mpem::experiments::{build_operator, nmse, MatrixKind};
use mpem::hmt::{expected_high_fraction, sample_prior};
use mpem::sensing::{
    scale_to_unit_spectral_norm, simulate_measurements, SensingOperator, Transform,
};
use mpem::{HmtParams, MpemError, TreeStructure};

/// Return code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpemStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    InvalidArgument = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

impl From<&MpemError> for MpemStatus {
    fn from(e: &MpemError) -> Self {
        match e {
            MpemError::Dimension(_) | MpemError::InvalidLevels(_) => MpemStatus::Dimension,
            MpemError::Range(_)
            | MpemError::InvalidParameter(_)
            | MpemError::Config(_)
            | MpemError::EmptyInput
            | MpemError::ZeroSignal => MpemStatus::InvalidArgument,
            MpemError::Convergence { .. }
            | MpemError::Degenerate
            | MpemError::Solve(_)
            | MpemError::InfiniteValue => MpemStatus::Numerical,
            MpemError::Io { .. } | MpemError::Format { .. } => MpemStatus::Io,
        }
    }
}

/// Values of the `kind` argument of [`mpem_operator_generate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpemMatrixKind {
    White = 0,
    RowCorrelated = 1,
    ColCorrelated = 2,
    StructurallyRandom = 3,
}

/// Prior tuning constants.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpemParams {
    pub gamma2: f64,
    pub eps2: f64,
    pub p_root: f64,
    pub p_high: f64,
    pub p_low: f64,
}

impl From<MpemParams> for HmtParams {
    fn from(p: MpemParams) -> Self {
        HmtParams {
            gamma2: p.gamma2,
            eps2: p.eps2,
            p_root: p.p_root,
            p_high: p.p_high,
            p_low: p.p_low,
        }
    }
}

/// EM stopping rule and variance grid.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpemEmConfig {
    pub delta: f64,
    pub max_iters: usize,
    pub grid_k: usize,
    pub grid_d: f64,
    pub refine_steps: usize,
}

impl From<MpemEmConfig> for EmConfig {
    fn from(c: MpemEmConfig) -> Self {
        EmConfig {
            delta: c.delta,
            max_iters: c.max_iters,
            grid_k: c.grid_k,
            grid_d: c.grid_d,
            record_trace: false,
            refine_steps: c.refine_steps,
        }
    }
}

/// Summary of one evaluated variance.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpemGridPoint {
    pub sigma2: f64,
    pub log_marginal: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct MpemTree(TreeStructure);

pub struct MpemOperator(Box<dyn SensingOperator>);

pub struct MpemResult(GridSearchResult);

enum Failure {
    Null(&'static str),
    Lib(MpemError),
}

impl From<MpemError> for Failure {
    fn from(e: MpemError) -> Self {
        Failure::Lib(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpemStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpemStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as {name}"));
            MpemStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            MpemStatus::from(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MpemStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        if len == 0 {
            return Ok(&[]);
        }
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        if len == 0 {
            return Ok(&mut []);
        }
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(name));
    }
    out.write(value);
    Ok(())
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(MpemError::Dimension(format!("{what} has length {got}, expected {want}")).into())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpem_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated) and returns the full message length plus one. Returns 0
/// when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mpem_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Reconstruction defaults `gamma2 = 1000, eps2 = 0.1, p_root = p_high = 0.2, p_low = 1e-5`.
#[no_mangle]
pub extern "C" fn mpem_params_default() -> MpemParams {
    let p = HmtParams::default();
    MpemParams {
        gamma2: p.gamma2,
        eps2: p.eps2,
        p_root: p.p_root,
        p_high: p.p_high,
        p_low: p.p_low,
    }
}

/// Small-scale defaults: `delta = 1e-10`, 16 grid points with ratio 2.
#[no_mangle]
pub extern "C" fn mpem_em_config_default() -> MpemEmConfig {
    let c = EmConfig::small_scale();
    MpemEmConfig {
        delta: c.delta,
        max_iters: c.max_iters,
        grid_k: c.grid_k,
        grid_d: c.grid_d,
        refine_steps: c.refine_steps,
    }
}

/// # Safety
/// `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mpem_expected_high_fraction(
    params: *const MpemParams,
    levels: usize,
    out: *mut f64,
) -> MpemStatus {
    guard(|| {
        let params = HmtParams::from(*as_ref(params, "params")?);
        params.validate()?;
        put(out, expected_high_fraction(&params, levels)?, "out")
    })
}

/// Wavelet tree of a `rows x cols` coefficient grid with `levels` levels.
///
/// # Safety
/// `out` must be a valid pointer; the handle is released with [`mpem_tree_free`].
#[no_mangle]
pub unsafe extern "C" fn mpem_tree_new(
    rows: usize,
    cols: usize,
    levels: usize,
    out: *mut *mut MpemTree,
) -> MpemStatus {
    guard(|| {
        let tree = TreeStructure::new(rows, cols, levels)?;
        put(out, Box::into_raw(Box::new(MpemTree(tree))), "out")
    })
}

/// Number of coefficients, 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpem_tree_len(tree: *const MpemTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `tree` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpem_tree_free(tree: *mut MpemTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Wraps the row-major `n x p` matrix `h` divided by its spectral norm,
/// which is written to `norm` (measurements must be divided by it too).
///
/// # Safety
/// `h` must hold `n * p` values; `norm` may be null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_from_matrix(
    h: *const f64,
    n: usize,
    p: usize,
    norm: *mut f64,
    out: *mut *mut MpemOperator,
) -> MpemStatus {
    guard(|| {
        let len = n
            .checked_mul(p)
            .ok_or_else(|| MpemError::Dimension("n * p overflows".into()))?;
        let phi = DMatrix::from_row_slice(n, p, as_slice(h, len, "h")?);
        let scaled = scale_to_unit_spectral_norm(&phi, &Transform::Identity, &vec![0.0; n], 0.0)?;
        if !norm.is_null() {
            norm.write(scaled.phi_norm);
        }
        put(out, Box::into_raw(Box::new(MpemOperator(Box::new(scaled.operator)))), "out")
    })
}

/// Random sensing operator with unit spectral norm; `kind` is an [`MpemMatrixKind`] value.
/// `corr` is used by the correlated kinds; the structurally random kind
/// synthesizes through the `levels`-level Haar transform, the Gaussian kinds
/// act on coefficients directly.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_generate(
    kind: u32,
    corr: f64,
    rows: usize,
    cols: usize,
    levels: usize,
    n: usize,
    seed: u64,
    out: *mut *mut MpemOperator,
) -> MpemStatus {
    guard(|| {
        let kind = match kind {
            k if k == MpemMatrixKind::White as u32 => MatrixKind::White,
            k if k == MpemMatrixKind::RowCorrelated as u32 => MatrixKind::RowCorrelated(corr),
            k if k == MpemMatrixKind::ColCorrelated as u32 => MatrixKind::ColCorrelated(corr),
            k if k == MpemMatrixKind::StructurallyRandom as u32 => MatrixKind::StructurallyRandom,
            other => return Err(MpemError::InvalidParameter(format!("unknown matrix kind {other}")).into()),
        };
        let op = build_operator(kind, rows, cols, levels, n, &Transform::Identity, seed)?;
        put(out, Box::into_raw(Box::new(MpemOperator(op))), "out")
    })
}

/// # Safety
/// `op` must be a live handle; `n` and `p` may be null.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_dims(
    op: *const MpemOperator,
    n: *mut usize,
    p: *mut usize,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        if !n.is_null() {
            n.write(op.n_measurements());
        }
        if !p.is_null() {
            p.write(op.n_coefficients());
        }
        Ok(())
    })
}

/// `y = H x`.
///
/// # Safety
/// `x` must hold `p` values and `y` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_forward(
    op: *const MpemOperator,
    x: *const f64,
    p: usize,
    y: *mut f64,
    n: usize,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        check_len(p, op.n_coefficients(), "x")?;
        check_len(n, op.n_measurements(), "y")?;
        op.forward_into(as_slice(x, p, "x")?, as_slice_mut(y, n, "y")?);
        Ok(())
    })
}

/// `x = H^T y`.
///
/// # Safety
/// `y` must hold `n` values and `x` room for `p` values.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_adjoint(
    op: *const MpemOperator,
    y: *const f64,
    n: usize,
    x: *mut f64,
    p: usize,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        check_len(n, op.n_measurements(), "y")?;
        check_len(p, op.n_coefficients(), "x")?;
        op.adjoint_into(as_slice(y, n, "y")?, as_slice_mut(x, p, "x")?);
        Ok(())
    })
}

/// # Safety
/// `op` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpem_operator_free(op: *mut MpemOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// Draws states and coefficients from the prior; `q` receives 0/1 bytes.
///
/// # Safety
/// `s` and `q` must have room for `p` entries.
#[no_mangle]
pub unsafe extern "C" fn mpem_sample_prior(
    tree: *const MpemTree,
    params: *const MpemParams,
    sigma2: f64,
    seed: u64,
    s: *mut f64,
    q: *mut u8,
    p: usize,
) -> MpemStatus {
    guard(|| {
        let tree = &as_ref(tree, "tree")?.0;
        let params = HmtParams::from(*as_ref(params, "params")?);
        params.validate()?;
        check_len(p, tree.len(), "s")?;
        let draw = sample_prior(tree, &params, sigma2, seed)?;
        as_slice_mut(s, p, "s")?.copy_from_slice(&draw.s);
        for (dst, &src) in as_slice_mut(q, p, "q")?.iter_mut().zip(&draw.q) {
            *dst = u8::from(src);
        }
        Ok(())
    })
}

/// `y = H s + w` with `w ~ N(0, sigma2 I)`.
///
/// # Safety
/// `s` must hold `p` values and `y` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn mpem_simulate_measurements(
    op: *const MpemOperator,
    s: *const f64,
    p: usize,
    sigma2: f64,
    seed: u64,
    y: *mut f64,
    n: usize,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        check_len(n, op.n_measurements(), "y")?;
        let m = simulate_measurements(op.as_ref(), as_slice(s, p, "s")?, sigma2, seed)?;
        as_slice_mut(y, n, "y")?.copy_from_slice(&m.y);
        Ok(())
    })
}

/// EM over the variance grid, selecting by marginal posterior.
///
/// # Safety
/// Handles and parameter pointers must be valid, `y` must hold `n` values;
/// the result is released with [`mpem_result_free`].
#[no_mangle]
pub unsafe extern "C" fn mpem_grid_search(
    op: *const MpemOperator,
    tree: *const MpemTree,
    y: *const f64,
    n: usize,
    params: *const MpemParams,
    config: *const MpemEmConfig,
    out: *mut *mut MpemResult,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        let tree = &as_ref(tree, "tree")?.0;
        let params = HmtParams::from(*as_ref(params, "params")?);
        params.validate()?;
        let config = EmConfig::from(*as_ref(config, "config")?);
        let res = grid_search(op.as_ref(), as_slice(y, n, "y")?, &config, tree, &params)?;
        put(out, Box::into_raw(Box::new(MpemResult(res))), "out")
    })
}

/// A single EM run at fixed `sigma2` from zero, packaged as a one-point result.
///
/// # Safety
/// As [`mpem_grid_search`].
#[no_mangle]
pub unsafe extern "C" fn mpem_run_em(
    op: *const MpemOperator,
    tree: *const MpemTree,
    y: *const f64,
    n: usize,
    sigma2: f64,
    params: *const MpemParams,
    config: *const MpemEmConfig,
    out: *mut *mut MpemResult,
) -> MpemStatus {
    guard(|| {
        let op = &as_ref(op, "op")?.0;
        let tree = &as_ref(tree, "tree")?.0;
        let params = HmtParams::from(*as_ref(params, "params")?);
        let config = EmConfig::from(*as_ref(config, "config")?);
        let y = as_slice(y, n, "y")?;
        let run = run_em(op.as_ref(), y, sigma2, &vec![0.0; tree.len()], &config, tree, &params)?;
        let log_marginal = log_marginal_posterior(&run.estimate, op.as_ref(), y, tree, &params)?;
        let res = GridSearchResult {
            points: vec![GridPoint {
                sigma2: run.sigma2,
                log_marginal,
                iterations: run.iterations,
                converged: run.converged,
                estimate: run.estimate,
                trace: run.trace,
            }],
            selected: 0,
        };
        put(out, Box::into_raw(Box::new(MpemResult(res))), "out")
    })
}

/// Number of evaluated variances, 0 for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_num_points(res: *const MpemResult) -> usize {
    res.as_ref().map_or(0, |r| r.0.points.len())
}

/// Index of the selected variance.
///
/// # Safety
/// `res` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_selected(res: *const MpemResult, out: *mut usize) -> MpemStatus {
    guard(|| put(out, as_ref(res, "res")?.0.selected, "out"))
}

/// # Safety
/// `res` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_point(
    res: *const MpemResult,
    index: usize,
    out: *mut MpemGridPoint,
) -> MpemStatus {
    guard(|| {
        let r = &as_ref(res, "res")?.0;
        let g = r.points.get(index).ok_or_else(|| {
            MpemError::Range(format!("point {index} of {}", r.points.len()))
        })?;
        put(
            out,
            MpemGridPoint {
                sigma2: g.sigma2,
                log_marginal: g.log_marginal,
                iterations: g.iterations,
                converged: g.converged,
            },
            "out",
        )
    })
}

/// Copies the selected coefficient estimate into `s` (`p` values).
///
/// # Safety
/// `s` must have room for `p` values.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_coefficients(
    res: *const MpemResult,
    s: *mut f64,
    p: usize,
) -> MpemStatus {
    guard(|| {
        let est = as_ref(res, "res")?.0.estimate();
        check_len(p, est.s.len(), "s")?;
        as_slice_mut(s, p, "s")?.copy_from_slice(&est.s);
        Ok(())
    })
}

/// Copies the selected states into `q` as 0/1 bytes.
///
/// # Safety
/// `q` must have room for `p` bytes.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_states(
    res: *const MpemResult,
    q: *mut u8,
    p: usize,
) -> MpemStatus {
    guard(|| {
        let est = as_ref(res, "res")?.0.estimate();
        check_len(p, est.q.len(), "q")?;
        for (dst, &src) in as_slice_mut(q, p, "q")?.iter_mut().zip(&est.q) {
            *dst = u8::from(src);
        }
        Ok(())
    })
}

/// # Safety
/// `res` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpem_result_free(res: *mut MpemResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// `||estimate - truth||^2 / ||truth||^2`.
///
/// # Safety
/// Both arrays must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mpem_nmse(
    estimate: *const f64,
    truth: *const f64,
    len: usize,
    out: *mut f64,
) -> MpemStatus {
    guard(|| {
        let v = nmse(as_slice(estimate, len, "estimate")?, as_slice(truth, len, "truth")?)?;
        put(out, v, "out")
    })
}
