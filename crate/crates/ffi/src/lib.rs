//! C ABI over `ismp`.
//!
//! Every function returns an [`IsmpStatus`]; on failure the message is kept
//! per thread and read with [`ismp_last_error_message`]. Ensembles are opaque
//! handles created by [`ismp_simulate_benchmark`] and released with
//! [`ismp_ensemble_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ismp::benchmarks::{lookup, BenchmarkId, BenchmarkParams};
use ismp::localtime::tanaka_local_time;
use ismp::sde::{ControlSpec, McSetup, PathEnsemble, SigmaVector, TimeGrid};
use ismp::stats::mean_and_se;
use ismp::IsmpError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsmpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Calibration = 4,
    Config = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque simulated ensemble.
pub struct IsmpEnsemble {
    inner: PathEnsemble,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

static VERSION: &CStr = match CStr::from_bytes_with_nul(
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes(),
) {
    Ok(s) => s,
    Err(_) => panic!("version string"),
};

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &IsmpError) -> IsmpStatus {
    match e {
        IsmpError::InvalidArgument(_) | IsmpError::GridMismatch(_) | IsmpError::ContractViolation(_) => {
            IsmpStatus::InvalidArgument
        }
        IsmpError::Calibration(_) | IsmpError::Uncalibrated => IsmpStatus::Calibration,
        IsmpError::Config(_) => IsmpStatus::Config,
        IsmpError::Io(_) | IsmpError::Csv(_) | IsmpError::Json(_) => IsmpStatus::Io,
        _ => IsmpStatus::Numerical,
    }
}

fn guard<F>(f: F) -> IsmpStatus
where
    F: FnOnce() -> Result<(), (IsmpStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            IsmpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IsmpStatus::Panic
        }
    }
}

fn lift<T>(r: ismp::Result<T>) -> Result<T, (IsmpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (IsmpStatus, String) {
    (IsmpStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ismp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn ismp_version() -> *const c_char {
    VERSION.as_ptr()
}

/// Simulates benchmark `benchmark` (1, 2 or 3) under the constant control
/// `control` and stores a new handle in `*out`.
///
/// # Safety
/// `sigma` must point to `sigma_len` doubles and `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ismp_simulate_benchmark(
    benchmark: u32,
    sigma: *const f64,
    sigma_len: usize,
    x0: f64,
    horizon: f64,
    steps: usize,
    paths: usize,
    control: f64,
    seed: u64,
    out: *mut *mut IsmpEnsemble,
) -> IsmpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if sigma.is_null() {
            return Err(null("sigma"));
        }
        let id = match benchmark {
            1 => BenchmarkId::B1,
            2 => BenchmarkId::B2,
            3 => BenchmarkId::B3,
            b => {
                return Err((
                    IsmpStatus::InvalidArgument,
                    format!("unknown benchmark {b} (expected 1, 2 or 3)"),
                ))
            }
        };
        if paths == 0 {
            return Err((IsmpStatus::InvalidArgument, "paths must be positive".into()));
        }
        let sigma = std::slice::from_raw_parts(sigma, sigma_len).to_vec();
        let bench = lookup(id);
        let params = BenchmarkParams::default();
        let grid = lift(TimeGrid::new(horizon, steps))?;
        let setup = McSetup {
            grid,
            sigma: lift(SigmaVector::new(sigma))?,
            x0,
            num_paths: paths,
            seed,
        };
        let spec = lift(ControlSpec::constant(
            &grid,
            lift(bench.control_box(&params))?,
            params.moment_bound,
            &[control],
        ))?;
        let ens = lift(setup.simulate(&bench.drift(&params), &spec))?;
        *out = Box::into_raw(Box::new(IsmpEnsemble { inner: ens }));
        Ok(())
    })
}

/// # Safety
/// `ensemble` must come from [`ismp_simulate_benchmark`]; the out pointers
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ismp_ensemble_shape(
    ensemble: *const IsmpEnsemble,
    paths: *mut usize,
    steps: *mut usize,
) -> IsmpStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        if paths.is_null() || steps.is_null() {
            return Err(null("output pointer"));
        }
        *paths = e.inner.num_paths();
        *steps = e.inner.steps();
        Ok(())
    })
}

/// Copies the `paths x (steps + 1)` state matrix, row-major by path, into
/// `buffer` of `len` doubles.
///
/// # Safety
/// `buffer` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ismp_ensemble_copy_states(
    ensemble: *const IsmpEnsemble,
    buffer: *mut f64,
    len: usize,
) -> IsmpStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        let states = e.inner.states();
        if len < states.len() {
            return Err((
                IsmpStatus::BufferTooSmall,
                format!("buffer holds {len} doubles, need {}", states.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buffer, states.len()).copy_from_slice(states);
        Ok(())
    })
}

/// Mean and standard error of the terminal Tanaka local time at `level`.
///
/// # Safety
/// `ensemble` must be a live handle; `mean` and `se` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ismp_local_time_mean(
    ensemble: *const IsmpEnsemble,
    level: f64,
    mean: *mut f64,
    se: *mut f64,
) -> IsmpStatus {
    guard(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        if mean.is_null() || se.is_null() {
            return Err(null("output pointer"));
        }
        let curve = lift(tanaka_local_time(&e.inner, level))?;
        let terminal: Vec<f64> = (0..curve.num_paths()).map(|p| curve.terminal(p)).collect();
        let (m, s) = mean_and_se(&terminal);
        *mean = m;
        *se = s;
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ismp_ensemble_free(ensemble: *mut IsmpEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Runs a config file; `*exit_code` receives 0 (pass) or 2 (verification
/// failure). Errors are reported through the status.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `exit_code` writable.
#[no_mangle]
pub unsafe extern "C" fn ismp_run_config(
    config_path: *const c_char,
    exit_code: *mut i32,
) -> IsmpStatus {
    guard(|| {
        if config_path.is_null() {
            return Err(null("config_path"));
        }
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let path = CStr::from_ptr(config_path)
            .to_str()
            .map_err(|e| (IsmpStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
        let out = lift(ismp::runner::run_file(Path::new(path)))?;
        *exit_code = out.exit_code();
        Ok(())
    })
}
