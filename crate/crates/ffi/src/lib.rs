//! C ABI over `kinetic-core`.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns a `KcStatus`; on failure the message
//! is available from `kc_last_error_message` on the same thread. Outputs are
//! written only on success.

use kinetic_core::combinatorics::verify_cluster_expansion;
use kinetic_core::experiment::kinetic_for;
use kinetic_core::hierarchy::{reduce_observable_all, ObservableSeq};
use kinetic_core::kinetic::Kinetic;
use kinetic_core::model::{load_model, load_model_file, ExperimentConfig};
use kinetic_core::montecarlo::Simulator;
use kinetic_core::operators::{Direction, Dynamics};
use kinetic_core::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KcStatus {
    Ok = 0,
    NullPointer = 1,
    Parse = 2,
    Validation = 3,
    InvalidArgument = 4,
    CapExceeded = 5,
    Numerical = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded and validated configuration.
pub struct KcModel {
    config: ExperimentConfig,
}

/// A kinetic solver bound to one model and interaction strength.
pub struct KcKinetic {
    kinetic: Kinetic,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> KcStatus {
    match e {
        Error::Parse(_) => KcStatus::Parse,
        Error::Validation { .. } => KcStatus::Validation,
        Error::CapExceeded { .. } => KcStatus::CapExceeded,
        Error::NonFinite(_) | Error::ZeroNorm | Error::StepRejected { .. } => KcStatus::Numerical,
        Error::Io(_) => KcStatus::Io,
        _ => KcStatus::InvalidArgument,
    }
}

fn fail(status: KcStatus, msg: impl Into<String>) -> KcStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), KcStatus>) -> KcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(KcStatus::Panic, "internal panic"),
    }
}

fn core<T>(r: kinetic_core::Result<T>) -> Result<T, KcStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, KcStatus> {
    p.as_ref().ok_or_else(|| fail(KcStatus::NullPointer, "null handle"))
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, KcStatus> {
    if p.is_null() {
        return Err(fail(KcStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KcStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], KcStatus> {
    if p.is_null() {
        return Err(fail(KcStatus::NullPointer, "null input array"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T) -> Result<(), KcStatus> {
    if p.is_null() {
        return Err(fail(KcStatus::NullPointer, "null output pointer"));
    }
    p.write(v);
    Ok(())
}

unsafe fn write_array(out: *mut f64, len: usize, values: &[f64]) -> Result<(), KcStatus> {
    if out.is_null() {
        return Err(fail(KcStatus::NullPointer, "null output array"));
    }
    if len < values.len() {
        return Err(fail(
            KcStatus::BufferTooSmall,
            format!("need {} values, buffer holds {len}", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn additive(model: &KcModel, o10: *const f64, o01: *const f64, len: usize) -> Result<ObservableSeq, KcStatus> {
    let n = model.config.model.n_states();
    if len != n {
        return Err(fail(KcStatus::InvalidArgument, format!("observable length {len}, model has {n} states")));
    }
    Ok(ObservableSeq::additive(slice(o10, len)?, slice(o01, len)?, model.config.model.n_max))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn kc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_from_toml(toml: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        let config = core(load_model(c_str(toml)?))?;
        write_out(out, Box::into_raw(Box::new(KcModel { config })))
    })
}

/// Loads and validates a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_from_file(path: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        let config = core(load_model_file(Path::new(c_str(path)?)))?;
        write_out(out, Box::into_raw(Box::new(KcModel { config })))
    })
}

/// # Safety
/// `model` must be null or a handle from `kc_model_from_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kc_model_free(model: *mut KcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of entity states; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_model_n_states(model: *const KcModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.model.n_states())
}

/// Environment truncation `n_max`; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_model_n_max(model: *const KcModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.model.n_max)
}

/// Max deviation between the cumulant partition sum and the semigroup on
/// sector `1+s` with `n` singled-out slots. `dual` selects the generator
/// acting on distributions.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_cluster_residual(
    model: *const KcModel,
    dual: bool,
    t: f64,
    s: usize,
    n: usize,
    out: *mut f64,
) -> KcStatus {
    guard(|| {
        let m = deref(model)?;
        let d = Dynamics::new(m.config.model.clone());
        let dir = if dual { Direction::Dual } else { Direction::Forward };
        write_out(out, core(verify_cluster_expansion(&d, dir, t, s, n))?)
    })
}

/// Monte Carlo estimate of the mean of the additive observable
/// `o10(tracer) + sum_i o01(x_i)` at time `t`.
///
/// # Safety
/// `model` must be a live handle; `o10`, `o01` must hold `len` values; the
/// outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_mc_mean_additive(
    model: *const KcModel,
    o10: *const f64,
    o01: *const f64,
    len: usize,
    t: f64,
    n_traj: usize,
    seed: u64,
    mean: *mut f64,
    stderr: *mut f64,
) -> KcStatus {
    guard(|| {
        let m = deref(model)?;
        let o = additive(m, o10, o01, len)?;
        let c = &m.config;
        let sim = core(Simulator::new(c.model.clone(), &c.initial, c.activity))?;
        let est = core(sim.estimate_mean(&o, t, n_traj, seed))?;
        write_out(mean, est.mean)?;
        write_out(stderr, est.stderr)
    })
}

/// Builds a kinetic solver for `model` with interaction strength `eps`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_kinetic_new(model: *const KcModel, eps: f64, out: *mut *mut KcKinetic) -> KcStatus {
    guard(|| {
        let m = deref(model)?;
        let kinetic = core(kinetic_for(&m.config, eps))?;
        write_out(out, Box::into_raw(Box::new(KcKinetic { kinetic })))
    })
}

/// # Safety
/// `kinetic` must be null or a handle from `kc_kinetic_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kc_kinetic_free(kinetic: *mut KcKinetic) {
    if !kinetic.is_null() {
        drop(Box::from_raw(kinetic));
    }
}

/// Tracer distribution at `t` from the order-`order` series.
///
/// # Safety
/// `kinetic` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn kc_kinetic_tracer_distribution(
    kinetic: *const KcKinetic,
    t: f64,
    order: usize,
    out: *mut f64,
    len: usize,
) -> KcStatus {
    guard(|| {
        let k = deref(kinetic)?;
        let f = core(k.kinetic.reduced_distribution(t, order))?;
        write_array(out, len, &f.values)
    })
}

/// Integrates the kinetic equation from the initial tracer marginal to
/// `t_max` and writes the endpoint.
///
/// # Safety
/// `kinetic` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn kc_kinetic_integrate(
    kinetic: *const KcKinetic,
    t_max: f64,
    dt: f64,
    order: usize,
    out: *mut f64,
    len: usize,
) -> KcStatus {
    guard(|| {
        let k = deref(kinetic)?;
        let f0 = k.kinetic.profile().tracer0.clone();
        let traj = core(k.kinetic.integrate_fp(&f0, t_max, dt, order))?;
        let end = traj.last().expect("trajectory includes t = 0");
        write_array(out, len, &end.values)
    })
}

/// Both sides of the duality identity for the additive observable at `t`.
///
/// # Safety
/// `kinetic` and `model` must be live handles (the solver built from this
/// model); `o10`, `o01` must hold `len` values; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_kinetic_duality_additive(
    kinetic: *const KcKinetic,
    model: *const KcModel,
    o10: *const f64,
    o01: *const f64,
    len: usize,
    t: f64,
    order: usize,
    lhs: *mut f64,
    rhs: *mut f64,
) -> KcStatus {
    guard(|| {
        let k = deref(kinetic)?;
        let o = additive(deref(model)?, o10, o01, len)?;
        let b0 = core(reduce_observable_all(&o))?;
        let r = core(k.kinetic.duality_check(&b0, t, order))?;
        write_out(lhs, r.lhs)?;
        write_out(rhs, r.rhs)
    })
}
