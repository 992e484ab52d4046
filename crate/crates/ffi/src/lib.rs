//! C interface: opaque dataset and result handles, status codes, and a
//! thread-local message for the last failure.
//!
//! Strings returned through out-pointers are owned by the caller and must be
//! released with `dta_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dtameta::analysis::{run_analysis, AnalysisConfig, AnalysisError, AnalysisResult};
use dtameta::data::{parse_dataset, Dataset};
use dtameta::outputs::{
    forest_data, render, sroc_scene_groups, ForestOrder, OutputFormat, Renderable, SceneOptions,
};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidData = 3,
    InvalidConfig = 4,
    Runtime = 5,
    NotFound = 6,
    Panic = 7,
}

/// A parsed study table.
pub struct DtaDataset {
    inner: Dataset,
}

/// A completed analysis.
pub struct DtaResult {
    inner: AnalysisResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: DtaStatus, msg: impl std::fmt::Display) -> DtaStatus {
    set_error(msg.to_string());
    status
}

/// Runs `f`, turning panics into `DtaStatus::Panic`.
fn guard(f: impl FnOnce() -> DtaStatus) -> DtaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DtaStatus::Panic, "internal panic"))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, DtaStatus> {
    if p.is_null() {
        return Err(fail(DtaStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(DtaStatus::InvalidUtf8, e))
}

unsafe fn give_string(out: *mut *mut c_char, s: String) -> DtaStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            DtaStatus::Ok
        }
        Err(e) => fail(DtaStatus::Runtime, e),
    }
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// call into the library from the same thread.
#[no_mangle]
pub extern "C" fn dta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dta_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses CSV text into a dataset handle.
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_dataset_parse(csv: *const c_char, out: *mut *mut DtaDataset) -> DtaStatus {
    guard(|| {
        if out.is_null() {
            return fail(DtaStatus::NullPointer, "null out pointer");
        }
        let csv = match text(csv) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_dataset(csv) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(DtaDataset { inner: d }));
                DtaStatus::Ok
            }
            Err(e) => fail(DtaStatus::InvalidData, e),
        }
    })
}

/// Number of studies, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dta_dataset_len(ds: *const DtaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be NULL or a handle from `dta_dataset_parse`, freed once.
#[no_mangle]
pub unsafe extern "C" fn dta_dataset_free(ds: *mut DtaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs an analysis described by a JSON configuration. Blocks until done.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_json` a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_analysis_run(
    ds: *const DtaDataset,
    config_json: *const c_char,
    out: *mut *mut DtaResult,
) -> DtaStatus {
    guard(|| {
        let (Some(ds), false) = (ds.as_ref(), out.is_null()) else {
            return fail(DtaStatus::NullPointer, "null handle or out pointer");
        };
        let cfg = match text(config_json).map(AnalysisConfig::from_json) {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => return fail(DtaStatus::InvalidConfig, e),
            Err(s) => return s,
        };
        match run_analysis(&ds.inner, &cfg, &|_| true) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(DtaResult { inner: r }));
                DtaStatus::Ok
            }
            Err(e @ (AnalysisError::Config(_) | AnalysisError::Prior(_))) => fail(DtaStatus::InvalidConfig, e),
            Err(e @ AnalysisError::Data(_)) => fail(DtaStatus::InvalidData, e),
            Err(e) => fail(DtaStatus::Runtime, e),
        }
    })
}

/// Loads a result from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_result_parse(json: *const c_char, out: *mut *mut DtaResult) -> DtaStatus {
    guard(|| {
        if out.is_null() {
            return fail(DtaStatus::NullPointer, "null out pointer");
        }
        let json = match text(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::from_str::<AnalysisResult>(json) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(DtaResult { inner: r }));
                DtaStatus::Ok
            }
            Err(e) => fail(DtaStatus::InvalidData, e),
        }
    })
}

/// Result as JSON, identical to the CLI and service output.
///
/// # Safety
/// `res` must be a live result handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_result_json(res: *const DtaResult, out: *mut *mut c_char) -> DtaStatus {
    guard(|| match (res.as_ref(), out.is_null()) {
        (Some(r), false) => give_string(out, r.inner.to_json()),
        _ => fail(DtaStatus::NullPointer, "null handle or out pointer"),
    })
}

/// Posterior median of a named quantity. `group` selects a subgroup fit and
/// may be NULL.
///
/// # Safety
/// `res` must be a live result handle, `name` a NUL-terminated string, `group`
/// NULL or a NUL-terminated string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_result_median(
    res: *const DtaResult,
    group: *const c_char,
    name: *const c_char,
    out: *mut f64,
) -> DtaStatus {
    guard(|| {
        let (Some(r), false) = (res.as_ref(), out.is_null()) else {
            return fail(DtaStatus::NullPointer, "null handle or out pointer");
        };
        let name = match text(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let group = if group.is_null() {
            ""
        } else {
            match text(group) {
                Ok(t) => t,
                Err(s) => return s,
            }
        };
        let fits = r.inner.fits();
        let Some((_, fit)) = fits.iter().find(|(l, _)| *l == group) else {
            return fail(DtaStatus::NotFound, format!("no fit labelled {group:?}"));
        };
        match fit.median(name) {
            Some(v) => {
                *out = v;
                DtaStatus::Ok
            }
            None => fail(DtaStatus::NotFound, format!("no quantity named {name:?}")),
        }
    })
}

/// 1 when every convergence gate passed, 0 otherwise (or for NULL).
///
/// # Safety
/// `res` must be NULL or a live result handle.
#[no_mangle]
pub unsafe extern "C" fn dta_result_passes(res: *const DtaResult) -> i32 {
    res.as_ref().map_or(0, |r| i32::from(r.inner.passes()))
}

/// # Safety
/// `res` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn dta_result_free(res: *mut DtaResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Renders a plot with default options. `kind` is "sroc" or "forest";
/// `format` is "svg" or "json". `res` may be NULL for "forest".
///
/// # Safety
/// `ds` must be a live dataset handle, `res` NULL or a live result handle,
/// `kind` and `format` NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dta_render(
    ds: *const DtaDataset,
    res: *const DtaResult,
    kind: *const c_char,
    format: *const c_char,
    out: *mut *mut c_char,
) -> DtaStatus {
    guard(|| {
        let (Some(ds), false) = (ds.as_ref(), out.is_null()) else {
            return fail(DtaStatus::NullPointer, "null dataset or out pointer");
        };
        let (kind, format) = match (text(kind), text(format)) {
            (Ok(k), Ok(f)) => (k, f),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let format: OutputFormat = match format.parse() {
            Ok(f) => f,
            Err(e) => return fail(DtaStatus::InvalidConfig, e),
        };
        let rendered = match kind {
            "sroc" => {
                let Some(r) = res.as_ref() else {
                    return fail(DtaStatus::NullPointer, "sroc needs a result");
                };
                sroc_scene_groups(&r.inner.fits(), &ds.inner, &SceneOptions::default())
                    .and_then(|s| render(Renderable::Scene(&s), format))
            }
            "forest" => forest_data(&ds.inner, ForestOrder::Input).and_then(|f| render(Renderable::Forest(&f), format)),
            other => return fail(DtaStatus::InvalidConfig, format!("unknown plot kind {other:?}")),
        };
        match rendered {
            Ok(s) => give_string(out, s),
            Err(e) => fail(DtaStatus::Runtime, e),
        }
    })
}
