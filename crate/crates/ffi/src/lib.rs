//! C interface to the apkam engine.
//!
//! Every entry point returns an [`ApkamStatus`]. On failure the message is
//! kept per thread and can be read with [`apkam_last_error`]. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use apkam::apseries::Window;
use apkam::error::Error;
use apkam::kam::{
    kam_iterate, perturbation_size, verify_conjugacy, InvariantCurve, IterateOptions, KamConstants, KamSchedule, Mode,
    DEFAULT_SAMPLES,
};
use apkam::twistmap::{MapDefinition, MapWire, TwistMap};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApkamStatus {
    Ok = 0,
    NullArgument = 1,
    Invalid = 2,
    Numerical = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApkamMode {
    Practical = 0,
    Paper = 1,
}

/// Options of [`apkam_kam_run`]. Fill with [`apkam_kam_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ApkamKamOptions {
    pub mode: ApkamMode,
    /// Conjugacy tolerance, practical mode only.
    pub tol: f64,
    pub r0: f64,
    /// Non-positive means the map window.
    pub s0: f64,
    /// Non-positive means the measured perturbation size.
    pub eps0: f64,
    pub max_stage: usize,
    pub samples: usize,
}

/// A twist map in standard form with its frequency context.
pub struct ApkamMap {
    map: TwistMap,
}

/// An invariant curve found by the KAM iteration.
pub struct ApkamCurve {
    curve: InvariantCurve,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn invalid(detail: impl Into<String>) -> Failure {
    Failure::Engine(Error::InvalidInput {
        module: "ffi",
        detail: detail.into(),
    })
}

fn default_options() -> ApkamKamOptions {
    ApkamKamOptions {
        mode: ApkamMode::Practical,
        tol: 1e-10,
        r0: 1.0,
        s0: 0.0,
        eps0: 0.0,
        max_stage: 6,
        samples: DEFAULT_SAMPLES,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ApkamStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApkamStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("ffi: null argument `{what}`"));
            ApkamStatus::NullArgument
        }
        Ok(Err(Failure::Engine(e))) => {
            let status = if e.is_validation() {
                ApkamStatus::Invalid
            } else {
                ApkamStatus::Numerical
            };
            set_error(e.to_string());
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("ffi: internal panic: {msg}"));
            ApkamStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn apkam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn apkam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a map document with an embedded context and brings it to
/// standard form.
///
/// # Safety
/// `json` must be a nul-terminated string and `out_map` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_map_from_json(json: *const c_char, out_map: *mut *mut ApkamMap) -> ApkamStatus {
    guard(|| {
        let slot = out(out_map, "out_map")?;
        *slot = ptr::null_mut();
        if json.is_null() {
            return Err(Failure::Null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| invalid(format!("map text is not UTF-8: {e}")))?;
        let wire: MapWire = serde_json::from_str(text).map_err(|source| Error::Json {
            what: "map".into(),
            source,
        })?;
        let (map, _) = MapDefinition::from_wire_embedded(&wire)?.into_standard()?;
        *slot = Box::into_raw(Box::new(ApkamMap { map }));
        Ok(())
    })
}

/// # Safety
/// `map` must come from [`apkam_map_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apkam_map_free(map: *mut ApkamMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `map` must be a live handle and `alpha` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_map_alpha(map: *const ApkamMap, alpha: *mut f64) -> ApkamStatus {
    guard(|| {
        let m = deref(map, "map")?;
        *out(alpha, "alpha")? = m.map.alpha();
        Ok(())
    })
}

/// One step of the map.
///
/// # Safety
/// `map` must be a live handle, `x_out` and `y_out` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_map_apply(
    map: *const ApkamMap,
    x: f64,
    y: f64,
    x_out: *mut f64,
    y_out: *mut f64,
) -> ApkamStatus {
    guard(|| {
        let m = deref(map, "map")?;
        let (xo, yo) = (out(x_out, "x_out")?, out(y_out, "y_out")?);
        (*xo, *yo) = m.map.apply(x, y);
        Ok(())
    })
}

/// # Safety
/// `opts` must be writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_kam_options_default(opts: *mut ApkamKamOptions) -> ApkamStatus {
    guard(|| {
        *out(opts, "opts")? = default_options();
        Ok(())
    })
}

/// Runs the KAM iteration. `opts` may be null for the defaults.
///
/// # Safety
/// `map` must be a live handle, `opts` null or readable, `out_curve`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_kam_run(
    map: *const ApkamMap,
    opts: *const ApkamKamOptions,
    out_curve: *mut *mut ApkamCurve,
) -> ApkamStatus {
    guard(|| {
        let slot = out(out_curve, "out_curve")?;
        *slot = ptr::null_mut();
        let m = &deref(map, "map")?.map;
        let o = opts.as_ref().copied().unwrap_or_else(default_options);
        let s0 = if o.s0 > 0.0 { o.s0 } else { m.window.s };
        let eps0 = if o.eps0 > 0.0 {
            o.eps0
        } else {
            perturbation_size(&m.f, &m.g, Window::new(o.r0, s0)?)
        };
        let schedule = KamSchedule {
            r0: o.r0,
            s0,
            eps0,
            constants: KamConstants::default(),
            max_stage: o.max_stage,
        };
        let iterate = IterateOptions {
            mode: match o.mode {
                ApkamMode::Practical => Mode::Practical,
                ApkamMode::Paper => Mode::Paper,
            },
            tol_conj: o.tol,
            samples: o.samples,
        };
        let curve = kam_iterate(m, &schedule, &iterate)?;
        *slot = Box::into_raw(Box::new(ApkamCurve { curve }));
        Ok(())
    })
}

/// # Safety
/// `curve` must come from [`apkam_kam_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apkam_curve_free(curve: *mut ApkamCurve) {
    if !curve.is_null() {
        drop(Box::from_raw(curve));
    }
}

/// Conjugacy residual recorded by the iteration.
///
/// # Safety
/// `curve` must be a live handle and `residual` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_curve_residual(curve: *const ApkamCurve, residual: *mut f64) -> ApkamStatus {
    guard(|| {
        *out(residual, "residual")? = deref(curve, "curve")?.curve.conjugacy_residual;
        Ok(())
    })
}

/// # Safety
/// `curve` must be a live handle and `stages` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_curve_stages(curve: *const ApkamCurve, stages: *mut usize) -> ApkamStatus {
    guard(|| {
        *out(stages, "stages")? = deref(curve, "curve")?.curve.stage_log.len();
        Ok(())
    })
}

/// The curve point `(xi + u(xi), v(xi))`.
///
/// # Safety
/// `curve` must be a live handle, `x` and `y` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_curve_point(curve: *const ApkamCurve, xi: f64, x: *mut f64, y: *mut f64) -> ApkamStatus {
    guard(|| {
        let c = &deref(curve, "curve")?.curve;
        let (xo, yo) = (out(x, "x")?, out(y, "y")?);
        *xo = xi + c.u.evaluate_real(xi, 0.0);
        *yo = c.v.evaluate_real(xi, 0.0);
        Ok(())
    })
}

/// Recomputes the largest conjugacy defect over `samples` points.
///
/// # Safety
/// Both handles must be live and `residual` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_verify(
    curve: *const ApkamCurve,
    map: *const ApkamMap,
    samples: usize,
    residual: *mut f64,
) -> ApkamStatus {
    guard(|| {
        let c = &deref(curve, "curve")?.curve;
        let m = &deref(map, "map")?.map;
        if samples == 0 {
            return Err(invalid("samples must be positive"));
        }
        if c.u.basis().context() != m.basis().context() {
            return Err(Error::ContextMismatch.into());
        }
        *out(residual, "residual")? = verify_conjugacy(c, m, samples);
        Ok(())
    })
}

/// Serializes the curve. Release the string with [`apkam_string_free`].
///
/// # Safety
/// `curve` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn apkam_curve_to_json(curve: *const ApkamCurve, out_json: *mut *mut c_char) -> ApkamStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = ptr::null_mut();
        let c = &deref(curve, "curve")?.curve;
        let text = serde_json::to_string(&c.to_wire()).expect("curve serializes");
        *slot = CString::new(text).expect("JSON has no nul bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apkam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
