//! C ABI for the solver.
//!
//! A `DfpsSolver` is an opaque handle owning a config and, once trained or
//! loaded, a network bundle. Every function returns a `DfpsStatus`; on
//! failure the message is kept on the handle (or in a thread-local slot for
//! constructors) and is readable with `dfps_last_error`. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dfps::checkpoint;
use dfps::dfps::{run_dfps, DfpsConfig, Evaluation};
use dfps::model::{CoefficientRanges, Dims};
use dfps::networks::{parameter_count, NetworkBundle};
use dfps::DfpsError;

/// Status codes returned by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfpsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Numerical = 5,
    /// The operation needs a trained or loaded model.
    NotTrained = 6,
    Internal = 7,
}

/// Opaque solver handle.
pub struct DfpsSolver {
    config: DfpsConfig,
    bundle: Option<NetworkBundle>,
    evaluation: Option<Evaluation>,
    last_error: Option<CString>,
}

thread_local! {
    static GLOBAL_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn status_of(e: &DfpsError) -> DfpsStatus {
    match e {
        DfpsError::Config(_) | DfpsError::Serde(_) => DfpsStatus::Config,
        DfpsError::Io { .. } | DfpsError::Csv(_) => DfpsStatus::Io,
        DfpsError::Singular { .. } | DfpsError::Simulation { .. } | DfpsError::Training { .. } | DfpsError::Undefined(_) => DfpsStatus::Numerical,
        DfpsError::Contract(_) => DfpsStatus::Internal,
    }
}

fn to_cstring(msg: &str) -> CString {
    CString::new(msg.replace('\0', " ")).unwrap_or_default()
}

fn set_global_error(msg: &str) {
    GLOBAL_ERROR.with(|g| *g.borrow_mut() = Some(to_cstring(msg)));
}

struct Failure(DfpsStatus, String);

impl From<DfpsError> for Failure {
    fn from(e: DfpsError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn read_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DfpsStatus::NullArgument, "null string argument".into()));
    }
    // SAFETY: the caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(DfpsStatus::InvalidUtf8, "string argument is not UTF-8".into()))
}

/// Run `f` on the solver behind `h`, recording any failure on it.
fn with_solver(h: *mut DfpsSolver, f: impl FnOnce(&mut DfpsSolver) -> Result<(), Failure>) -> DfpsStatus {
    if h.is_null() {
        set_global_error("null solver handle");
        return DfpsStatus::NullArgument;
    }
    // SAFETY: non-null handles come from `dfps_solver_new` and are not shared
    // across threads without external synchronization.
    let solver = unsafe { &mut *h };
    match catch_unwind(AssertUnwindSafe(|| f(solver))) {
        Ok(Ok(())) => {
            solver.last_error = None;
            DfpsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            solver.last_error = Some(to_cstring(&msg));
            status
        }
        Err(_) => {
            solver.last_error = Some(to_cstring("internal panic"));
            DfpsStatus::Internal
        }
    }
}

/// Create a solver with the named profile (`"paper"` or `"smoke"`).
///
/// # Safety
/// `profile` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_new(profile: *const c_char, out: *mut *mut DfpsSolver) -> DfpsStatus {
    if out.is_null() {
        set_global_error("null output pointer");
        return DfpsStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let made = catch_unwind(|| -> Result<Box<DfpsSolver>, Failure> {
        let config = DfpsConfig::profile(read_str(profile)?)?;
        Ok(Box::new(DfpsSolver {
            config,
            bundle: None,
            evaluation: None,
            last_error: None,
        }))
    });
    match made {
        Ok(Ok(s)) => {
            *out = Box::into_raw(s);
            DfpsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_global_error(&msg);
            status
        }
        Err(_) => {
            set_global_error("internal panic");
            DfpsStatus::Internal
        }
    }
}

/// Destroy a solver; null is ignored.
///
/// # Safety
/// `h` must come from `dfps_solver_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_free(h: *mut DfpsSolver) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Last error message for `h`, or the thread's last constructor error when
/// `h` is null. The pointer stays valid until the next call on the same
/// handle; returns null when there is no error.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfps_last_error(h: *const DfpsSolver) -> *const c_char {
    if h.is_null() {
        return GLOBAL_ERROR.with(|g| g.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()));
    }
    (*h).last_error.as_ref().map_or(ptr::null(), |s| s.as_ptr())
}

/// Overwrite config fields from a JSON object.
///
/// # Safety
/// `h` must be a live handle and `json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_configure(h: *mut DfpsSolver, json: *const c_char) -> DfpsStatus {
    with_solver(h, |s| {
        let patched = s.config.with_json_patch(read_str(json)?)?;
        patched.validate()?;
        s.config = patched;
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_set_seed(h: *mut DfpsSolver, seed: u64) -> DfpsStatus {
    with_solver(h, |s| {
        s.config.seed = seed;
        Ok(())
    })
}

/// Train on the configured scenario pool and evaluate.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_train(h: *mut DfpsSolver) -> DfpsStatus {
    with_solver(h, |s| {
        let pool = s.config.scenario_pool(&CoefficientRanges::default())?;
        let run = run_dfps(&s.config, &pool)?;
        s.bundle = Some(run.bundle);
        s.evaluation = Some(run.evaluation);
        Ok(())
    })
}

fn trained(s: &DfpsSolver) -> Result<&NetworkBundle, Failure> {
    s.bundle
        .as_ref()
        .ok_or_else(|| Failure(DfpsStatus::NotTrained, "no trained model; call dfps_solver_train or dfps_solver_load".into()))
}

/// Evaluate the current model on the configured evaluation scenarios and
/// write the mean follower and leader costs.
///
/// # Safety
/// `h` must be a live handle; `j1` and `j2` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_costs(h: *mut DfpsSolver, j1: *mut f64, j2: *mut f64) -> DfpsStatus {
    if j1.is_null() || j2.is_null() {
        return with_solver(h, |_| Err(Failure(DfpsStatus::NullArgument, "null output pointer".into())));
    }
    with_solver(h, |s| {
        if s.evaluation.is_none() {
            let bundle = trained(s)?;
            let pool = s.config.scenario_pool(&CoefficientRanges::default())?;
            s.evaluation = Some(dfps::dfps::evaluate(bundle, &s.config, &pool)?);
        }
        let ev = s.evaluation.as_ref().unwrap();
        *j1 = ev.j1;
        *j2 = ev.j2;
        Ok(())
    })
}

/// Save the model as `<dir>/<stem>.bin` plus `<dir>/<stem>.json`.
///
/// # Safety
/// `h` must be a live handle; `dir` and `stem` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_save(h: *mut DfpsSolver, dir: *const c_char, stem: *const c_char) -> DfpsStatus {
    with_solver(h, |s| {
        let (dir, stem) = (read_str(dir)?, read_str(stem)?);
        checkpoint::save(trained(s)?, Path::new(dir), stem)?;
        Ok(())
    })
}

/// Load a model from a checkpoint manifest; the config dimensions follow it.
///
/// # Safety
/// `h` must be a live handle and `manifest` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dfps_solver_load(h: *mut DfpsSolver, manifest: *const c_char) -> DfpsStatus {
    with_solver(h, |s| {
        let bundle = checkpoint::load(Path::new(read_str(manifest)?))?;
        s.config.dims = bundle.dims;
        s.bundle = Some(bundle);
        s.evaluation = None;
        Ok(())
    })
}

/// Trainable parameter count of the networks for the given dimensions;
/// 0 for invalid dimensions.
#[no_mangle]
pub extern "C" fn dfps_parameter_count(n: usize, m1: usize, m2: usize) -> u64 {
    catch_unwind(|| Dims::new(n, m1, m2).map_or(0, |d| parameter_count(d) as u64)).unwrap_or(0)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dfps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
