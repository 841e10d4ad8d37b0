//! C ABI for the sode-geometry library.
//!
//! The surface mirrors the CLI: load a system definition from JSON into an
//! opaque handle, then run inspect/verify/reduce/roots, each returning a
//! JSON document as a newly allocated C string. All functions return a
//! status code; `sg_last_error` retrieves the message for the most recent
//! failure on the calling thread. Strings returned by this library must be
//! released with `sg_string_free`, handles with `sg_system_free`.

use sode_geometry::report::{
    cmd_inspect, cmd_reduce, cmd_roots, cmd_verify, LoadedFile, SystemFile, TensorSelection,
};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    SgOk = 0,
    SgInvalidArgument = 1,
    SgParseError = 2,
    SgEvalError = 3,
    SgUnsupported = 4,
    SgPanic = 5,
}

/// Opaque handle to a loaded system definition.
pub struct SgSystem {
    loaded: LoadedFile,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
}

fn classify(err: &sode_geometry::GeomError) -> SgStatus {
    use sode_geometry::GeomError::*;
    match err {
        Parse(_) => SgStatus::SgParseError,
        Jet(_) | Eval(_) | Component { .. } | SingularMatrix { .. } => SgStatus::SgEvalError,
        NotInSubmodule { .. } | NotDecomposition { .. } | OrderTooLow { .. } => {
            SgStatus::SgEvalError
        }
        Dimension(_) | Invalid(_) => SgStatus::SgInvalidArgument,
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SgStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(SgStatus::SgInvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        SgStatus::SgInvalidArgument
    })
}

fn give_string(out: *mut *mut c_char, s: String) -> SgStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            SgStatus::SgOk
        }
        Err(_) => {
            set_error("output contains an interior NUL byte");
            SgStatus::SgEvalError
        }
    }
}

fn guarded(f: impl FnOnce() -> SgStatus + std::panic::UnwindSafe) -> SgStatus {
    match catch_unwind(f) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SgStatus::SgPanic
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message for this thread into `buffer` (truncated to
/// `capacity` − 1 bytes, NUL terminated). Returns the full message length.
///
/// # Safety
/// `buffer` must point to at least `capacity` writable bytes, or be null
/// (in which case only the length is returned).
#[no_mangle]
pub unsafe extern "C" fn sg_last_error(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer as *mut u8, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parse and validate a system definition document (the same JSON format
/// the CLI consumes). On success `*out_system` owns the loaded system.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_system` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_system_load_json(
    json: *const c_char,
    out_system: *mut *mut SgSystem,
) -> SgStatus {
    guarded(AssertUnwindSafe(|| {
        if out_system.is_null() {
            set_error("out_system is null");
            return SgStatus::SgInvalidArgument;
        }
        let text = match read_str(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let file = match SystemFile::from_json(text) {
            Ok(f) => f,
            Err(e) => {
                set_error(e.to_string());
                return SgStatus::SgParseError;
            }
        };
        match file.load("system", 0.0) {
            Ok(loaded) => {
                *out_system = Box::into_raw(Box::new(SgSystem { loaded }));
                SgStatus::SgOk
            }
            Err(e) => {
                set_error(e.to_string());
                classify(&e)
            }
        }
    }))
}

/// Release a system handle. Null is ignored.
///
/// # Safety
/// `system` must have come from `sg_system_load_json` and not been freed.
#[no_mangle]
pub unsafe extern "C" fn sg_system_free(system: *mut SgSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

unsafe fn borrow_system<'a>(ptr: *const SgSystem) -> Result<&'a SgSystem, SgStatus> {
    if ptr.is_null() {
        set_error("system handle is null");
        return Err(SgStatus::SgInvalidArgument);
    }
    Ok(&*ptr)
}

/// Evaluate tensors at the file's points (or `npoints` sampled ones) and
/// return the report JSON. `tensors` may be null for "everything" or a
/// comma-separated subset (gamma,phi,k,curvature,torsion,connection,shape,
/// chetaev). With `use_file_seed` nonzero the file's seed is used and
/// `seed` is ignored.
///
/// # Safety
/// Pointers must be valid; the returned string is freed via
/// `sg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn sg_inspect_json(
    system: *const SgSystem,
    tensors: *const c_char,
    order: u32,
    npoints: u32,
    seed: u64,
    use_file_seed: i32,
    out_json: *mut *mut c_char,
) -> SgStatus {
    guarded(AssertUnwindSafe(|| {
        let sys = match borrow_system(system) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if out_json.is_null() {
            set_error("out_json is null");
            return SgStatus::SgInvalidArgument;
        }
        let sel = if tensors.is_null() {
            TensorSelection::all()
        } else {
            match read_str(tensors, "tensors").and_then(|t| {
                TensorSelection::parse(t).map_err(|e| {
                    set_error(e.to_string());
                    SgStatus::SgInvalidArgument
                })
            }) {
                Ok(s) => s,
                Err(e) => return e,
            }
        };
        let seed = if use_file_seed != 0 {
            sys.loaded.seed()
        } else {
            seed
        };
        match cmd_inspect(&sys.loaded, &sel, order as usize, npoints as usize, seed) {
            Ok(report) => give_string(out_json, report.to_json()),
            Err(e) => {
                set_error(e.to_string());
                classify(&e)
            }
        }
    }))
}

/// Run the invariant suites; the JSON carries the per-identity residuals,
/// the tolerance and the pass flag.
///
/// # Safety
/// As for `sg_inspect_json`.
#[no_mangle]
pub unsafe extern "C" fn sg_verify_json(
    system: *const SgSystem,
    npoints: u32,
    tol: f64,
    seed: u64,
    use_file_seed: i32,
    out_json: *mut *mut c_char,
) -> SgStatus {
    guarded(AssertUnwindSafe(|| {
        let sys = match borrow_system(system) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if out_json.is_null() {
            set_error("out_json is null");
            return SgStatus::SgInvalidArgument;
        }
        let seed = if use_file_seed != 0 {
            sys.loaded.seed()
        } else {
            seed
        };
        match cmd_verify(&sys.loaded, npoints as usize, seed) {
            Ok(report) => {
                let pass = report.passes(tol);
                let json = serde_json::json!({
                    "seed": seed,
                    "tolerance": tol,
                    "pass": pass,
                    "max_residual": report.max_residual(),
                    "residuals": report.into_map(),
                });
                give_string(out_json, serde_json::to_string_pretty(&json).unwrap())
            }
            Err(e) => {
                set_error(e.to_string());
                classify(&e)
            }
        }
    }))
}

/// Reduce a nonholonomic system at the file's points (or sampled ones).
///
/// # Safety
/// As for `sg_inspect_json`.
#[no_mangle]
pub unsafe extern "C" fn sg_reduce_json(
    system: *const SgSystem,
    npoints: u32,
    seed: u64,
    use_file_seed: i32,
    out_json: *mut *mut c_char,
) -> SgStatus {
    guarded(AssertUnwindSafe(|| {
        let sys = match borrow_system(system) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if out_json.is_null() {
            set_error("out_json is null");
            return SgStatus::SgInvalidArgument;
        }
        let seed = if use_file_seed != 0 {
            sys.loaded.seed()
        } else {
            seed
        };
        match cmd_reduce(&sys.loaded, npoints as usize, seed) {
            Ok(report) => give_string(out_json, serde_json::to_string_pretty(&report).unwrap()),
            Err(e) => {
                set_error(e.to_string());
                classify(&e)
            }
        }
    }))
}

/// Eigencondition polynomial and real roots per point.
///
/// # Safety
/// As for `sg_inspect_json`.
#[no_mangle]
pub unsafe extern "C" fn sg_roots_json(
    system: *const SgSystem,
    npoints: u32,
    seed: u64,
    use_file_seed: i32,
    out_json: *mut *mut c_char,
) -> SgStatus {
    guarded(AssertUnwindSafe(|| {
        let sys = match borrow_system(system) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if out_json.is_null() {
            set_error("out_json is null");
            return SgStatus::SgInvalidArgument;
        }
        let seed = if use_file_seed != 0 {
            sys.loaded.seed()
        } else {
            seed
        };
        match cmd_roots(&sys.loaded, npoints as usize, seed) {
            Ok(report) => give_string(out_json, serde_json::to_string_pretty(&report).unwrap()),
            Err(e) => {
                set_error(e.to_string());
                classify(&e)
            }
        }
    }))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must have come from this library and not been freed already.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
