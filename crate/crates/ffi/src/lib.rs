//! C interface to `bayesrom`.
//!
//! Handles are opaque pointers created by `*_new`/`*_fit`/`*_load` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`BayesromStatus`]; on failure the message is available from
//! [`bayesrom_last_error`] on the same thread. Matrices are dense,
//! column-major `f64` arrays: an `r × k` snapshot matrix stores snapshot `j`
//! at `data[j*r .. (j+1)*r]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bayesrom::regression::{OperatorPosterior, PriorMean, RegressionData};
use bayesrom::regselect::{fixed_point_select, FixedPointConfig};
use bayesrom::rom::{integrate, mean_operators, sample_operator, IntegrateOptions, RomOperators};
use bayesrom::tensorops::{d_dim, StructureFlags};
use bayesrom::RomError;
use nalgebra::{DMatrix, DVector};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BayesromStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    /// Rank deficiency, ill conditioning, or a failed factorization.
    Numerical = 4,
    Io = 5,
    /// Malformed input file or data.
    Format = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Operator blocks carried by a model; mirrors the library's structure flags.
/// Input blocks are not exposed, so there is no `inputs` field.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BayesromStructure {
    pub linear: bool,
    pub quadratic: bool,
    pub constant: bool,
}

impl From<BayesromStructure> for StructureFlags {
    fn from(s: BayesromStructure) -> Self {
        StructureFlags {
            linear: s.linear,
            quadratic: s.quadratic,
            inputs: 0,
            constant: s.constant,
        }
    }
}

/// Gaussian posterior over the operator matrix.
pub struct BayesromPosterior(OperatorPosterior);

/// One deterministic reduced model (a posterior mean or a draw).
pub struct BayesromRom(RomOperators);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &RomError) -> BayesromStatus {
    match err {
        RomError::InvalidArgument(_) | RomError::DegenerateRange { .. } => BayesromStatus::InvalidArgument,
        RomError::DimensionMismatch(_) => BayesromStatus::DimensionMismatch,
        RomError::Io(_) => BayesromStatus::Io,
        RomError::Format(_) | RomError::Json(_) | RomError::Csv(_) => BayesromStatus::Format,
        e if e.is_numerical() => BayesromStatus::Numerical,
        _ => BayesromStatus::InvalidArgument,
    }
}

struct Failure(BayesromStatus, String);

impl From<RomError> for Failure {
    fn from(e: RomError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(BayesromStatus::NullPointer, format!("`{name}` is null"))
}

/// Run `f`, translating errors and panics into a status and the last-error slot.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BayesromStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BayesromStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BayesromStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(BayesromStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn check_dims(r: usize, k: usize) -> Result<(), Failure> {
    if r == 0 || k == 0 {
        return Err(Failure(
            BayesromStatus::InvalidArgument,
            format!("r and k must be positive (r = {r}, k = {k})"),
        ));
    }
    Ok(())
}

unsafe fn regression(
    states: *const f64,
    derivatives: *const f64,
    r: usize,
    k: usize,
    structure: BayesromStructure,
) -> Result<RegressionData, Failure> {
    check_dims(r, k)?;
    let q = DMatrix::from_column_slice(r, k, slice(states, r * k, "states")?);
    let dq = DMatrix::from_column_slice(r, k, slice(derivatives, r * k, "derivatives")?);
    Ok(RegressionData::from_states(&q, None, dq, structure.into())?)
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bayesrom_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn bayesrom_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Number of operator entries per row, `d(r)`, for the given structure.
#[no_mangle]
pub extern "C" fn bayesrom_operator_width(r: usize, structure: BayesromStructure) -> usize {
    d_dim(r, &structure.into())
}

/// Fit the posterior with a fixed penalty `lambdas[i]` on every entry of row `i`.
///
/// # Safety
/// `states` and `derivatives` must point to `r*k` doubles, `lambdas` to `r`
/// doubles, and `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_fit(
    states: *const f64,
    derivatives: *const f64,
    r: usize,
    k: usize,
    structure: BayesromStructure,
    lambdas: *const f64,
    out: *mut *mut BayesromPosterior,
) -> BayesromStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = regression(states, derivatives, r, k, structure)?;
        let lam = slice(lambdas, r, "lambdas")?;
        let post = OperatorPosterior::fit_uniform(&data, lam, &PriorMean::Zero)?;
        store(out, BayesromPosterior(post));
        Ok(())
    })
}

/// Fit the posterior with penalties chosen by the evidence fixed-point
/// iteration from `initial_lambda`. `converged` and `iterations` may be null.
///
/// # Safety
/// As [`bayesrom_posterior_fit`]; `converged` and `iterations`, when not
/// null, must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bayesrom_posterior_fit_evidence(
    states: *const f64,
    derivatives: *const f64,
    r: usize,
    k: usize,
    structure: BayesromStructure,
    initial_lambda: f64,
    tolerance: f64,
    max_iterations: usize,
    out: *mut *mut BayesromPosterior,
    converged: *mut bool,
    iterations: *mut usize,
) -> BayesromStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = regression(states, derivatives, r, k, structure)?;
        let cfg = FixedPointConfig {
            initial_lambdas: vec![initial_lambda; r],
            tolerance,
            max_iterations,
        };
        let res = fixed_point_select(&data, &cfg)?;
        if !converged.is_null() {
            *converged = res.converged;
        }
        if !iterations.is_null() {
            *iterations = res.iterations;
        }
        store(out, BayesromPosterior(res.posterior));
        Ok(())
    })
}

/// Read a posterior written by the command-line tool or [`bayesrom_posterior_save`].
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_load(file: *const c_char, out: *mut *mut BayesromPosterior) -> BayesromStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = std::fs::read_to_string(path(file)?).map_err(RomError::from)?;
        store(out, BayesromPosterior(OperatorPosterior::from_json(&text)?));
        Ok(())
    })
}

/// Write the posterior as JSON.
///
/// # Safety
/// `posterior` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_save(posterior: *const BayesromPosterior, file: *const c_char) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        let json = post.0.to_json()?;
        std::fs::write(path(file)?, json).map_err(RomError::from)?;
        Ok(())
    })
}

/// Reduced dimension `r`, or 0 for a null handle.
///
/// # Safety
/// `posterior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_rank(posterior: *const BayesromPosterior) -> usize {
    posterior.as_ref().map_or(0, |p| p.0.r)
}

/// Operator entries per row, or 0 for a null handle.
///
/// # Safety
/// `posterior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_width(posterior: *const BayesromPosterior) -> usize {
    posterior.as_ref().map_or(0, |p| p.0.dim())
}

/// Copy the posterior mean operator (`r × d`, column-major) into `out`.
///
/// # Safety
/// `posterior` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_mean(posterior: *const BayesromPosterior, out: *mut f64, len: usize) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        let m = post.0.mean_matrix();
        copy_out(m.as_slice(), out, len)
    })
}

/// Copy the noise variances `σ*²` (one per row) into `out`.
///
/// # Safety
/// `posterior` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_noise_variances(
    posterior: *const BayesromPosterior,
    out: *mut f64,
    len: usize,
) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        copy_out(&post.0.noise_vars(), out, len)
    })
}

/// Copy the `d × d` covariance of row `row` (column-major) into `out`.
///
/// # Safety
/// `posterior` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_row_covariance(
    posterior: *const BayesromPosterior,
    row: usize,
    out: *mut f64,
    len: usize,
) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        let r = post.0.rows.get(row).ok_or_else(|| {
            Failure(
                BayesromStatus::InvalidArgument,
                format!("row {row} out of range for r = {}", post.0.r),
            )
        })?;
        copy_out(r.covariance.as_slice(), out, len)
    })
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if len != src.len() {
        return Err(Failure(
            BayesromStatus::DimensionMismatch,
            format!("output buffer holds {len} values, need {}", src.len()),
        ));
    }
    slice_mut(out, len, "out")?.copy_from_slice(src);
    Ok(())
}

/// Release a posterior handle; null is ignored.
///
/// # Safety
/// `posterior` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_posterior_free(posterior: *mut BayesromPosterior) {
    if !posterior.is_null() {
        drop(Box::from_raw(posterior));
    }
}

/// Reduced model with the posterior mean operators.
///
/// # Safety
/// `posterior` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_from_mean(posterior: *const BayesromPosterior, out: *mut *mut BayesromRom) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, BayesromRom(mean_operators(&post.0)?));
        Ok(())
    })
}

/// Posterior draw number `index` under `seed`; the same pair always gives
/// the same operators.
///
/// # Safety
/// `posterior` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_sample(
    posterior: *const BayesromPosterior,
    seed: u64,
    index: u64,
    out: *mut *mut BayesromRom,
) -> BayesromStatus {
    guard(|| {
        let post = posterior.as_ref().ok_or_else(|| null("posterior"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, BayesromRom(sample_operator(&post.0, seed, index)?));
        Ok(())
    })
}

/// Reduced model from an explicit `r × d` operator matrix (column-major).
///
/// # Safety
/// `operator` must hold `r * bayesrom_operator_width(r, structure)` doubles
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_new(
    operator: *const f64,
    r: usize,
    structure: BayesromStructure,
    out: *mut *mut BayesromRom,
) -> BayesromStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        check_dims(r, 1)?;
        let flags: StructureFlags = structure.into();
        flags.validate()?;
        let d = d_dim(r, &flags);
        let o = DMatrix::from_column_slice(r, d, slice(operator, r * d, "operator")?);
        store(out, BayesromRom(RomOperators::new(o, flags)?));
        Ok(())
    })
}

/// Integrate from `q0` and write the state at each of the `n_times` grid
/// points into `out` (`r × n_times`, column-major). A bound `≤ 0` or NaN
/// checks finiteness only. After a blow-up `*stable` is false and the
/// remaining columns are NaN.
///
/// # Safety
/// `rom` must be a live handle; `q0` must hold `r` doubles, `times`
/// `n_times` doubles, `out` `r * n_times` doubles; `stable` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_integrate(
    rom: *const BayesromRom,
    q0: *const f64,
    times: *const f64,
    n_times: usize,
    bound: f64,
    out: *mut f64,
    stable: *mut bool,
) -> BayesromStatus {
    guard(|| {
        let ops = &rom.as_ref().ok_or_else(|| null("rom"))?.0;
        if stable.is_null() {
            return Err(null("stable"));
        }
        let r = ops.r();
        let q = DVector::from_column_slice(slice(q0, r, "q0")?);
        let grid = slice(times, n_times, "times")?;
        let out = slice_mut(out, r * n_times, "out")?;
        let opts = IntegrateOptions {
            bound: (bound > 0.0).then_some(bound),
            ..IntegrateOptions::default()
        };
        let tr = integrate(ops, &q, grid, None, &opts)?;
        out.fill(f64::NAN);
        out[..tr.states.len()].copy_from_slice(tr.states.as_slice());
        *stable = tr.is_stable();
        Ok(())
    })
}

/// Reduced dimension of a model, or 0 for a null handle.
///
/// # Safety
/// `rom` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_rank(rom: *const BayesromRom) -> usize {
    rom.as_ref().map_or(0, |m| m.0.r())
}

/// Release a model handle; null is ignored.
///
/// # Safety
/// `rom` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bayesrom_rom_free(rom: *mut BayesromRom) {
    if !rom.is_null() {
        drop(Box::from_raw(rom));
    }
}
