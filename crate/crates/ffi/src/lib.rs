//! C ABI over `tcskd`: load scene datasets and checkpoints, run a model on
//! a scene, and evaluate on a whole split.
//!
//! Objects are opaque handles released with their `*_free` function. Every
//! fallible call returns a [`TcsStatus`]; on failure the message is
//! available from [`tcs_last_error_message`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tcskd::evalkit::{evaluate, predict};
use tcskd::nets::{NetParams, Role};
use tcskd::scenegen::{load_dataset, SceneSample, NUM_CLASSES};
use tcskd::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Shape = 5,
    MissingInput = 6,
    Internal = 7,
    Panic = 8,
}

/// A loaded scene container.
pub struct TcsDataset {
    samples: Vec<SceneSample>,
}

/// A loaded model checkpoint.
pub struct TcsModel {
    params: NetParams,
}

/// Validation metrics, as fractions in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TcsMetrics {
    pub iou: [f64; 3],
    pub miou: f64,
    pub ap: [f64; 3],
    pub map: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TcsStatus {
    match e {
        Error::Io { .. } => TcsStatus::Io,
        Error::Corrupt { .. } => TcsStatus::Corrupt,
        Error::Shape { .. } => TcsStatus::Shape,
        Error::MissingInput(_) => TcsStatus::MissingInput,
        Error::InvalidArgument(_) | Error::Config(_) => TcsStatus::InvalidArgument,
        _ => TcsStatus::Internal,
    }
}

fn fail(status: TcsStatus, msg: impl Into<String>) -> TcsStatus {
    set_error(msg.into());
    status
}

/// Run `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), TcsStatus>) -> TcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(TcsStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> TcsStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, TcsStatus> {
    if p.is_null() {
        return Err(fail(TcsStatus::NullPointer, "path is null"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(TcsStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, TcsStatus> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or_else(|| fail(TcsStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failure on this thread, or NULL. Owned by the
/// library; valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tcs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a `.tcsd` scene container.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_dataset_load(
    path: *const c_char,
    out: *mut *mut TcsDataset,
) -> TcsStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TcsStatus::NullPointer, "out is null"));
        }
        let path = unsafe { path_arg(path)? };
        let ds = load_dataset(&path).map_err(lib_err)?;
        let h = Box::into_raw(Box::new(TcsDataset {
            samples: ds.samples,
        }));
        unsafe { *out = h };
        Ok(())
    })
}

/// Number of scenes, 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_dataset_len(ds: *const TcsDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.samples.len())
}

/// Grid height and width of the scenes.
///
/// # Safety
/// `ds` must be a live handle; `h` and `w` writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_dataset_grid(
    ds: *const TcsDataset,
    h: *mut usize,
    w: *mut usize,
) -> TcsStatus {
    guard(|| {
        let d = unsafe { handle(ds, "dataset")? };
        if h.is_null() || w.is_null() {
            return Err(fail(TcsStatus::NullPointer, "h or w is null"));
        }
        let s = d
            .samples
            .first()
            .ok_or_else(|| fail(TcsStatus::MissingInput, "dataset is empty"))?
            .gt_sem
            .shape();
        unsafe {
            *h = s[2];
            *w = s[3];
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from [`tcs_dataset_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn tcs_dataset_free(ds: *mut TcsDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Load a `.tcsp` checkpoint of any role.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_model_load(path: *const c_char, out: *mut *mut TcsModel) -> TcsStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TcsStatus::NullPointer, "out is null"));
        }
        let path = unsafe { path_arg(path)? };
        let params = NetParams::load(&path).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(TcsModel { params })) };
        Ok(())
    })
}

/// 0 teacher, 1 coach, 2 student; -1 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_model_role(m: *const TcsModel) -> i32 {
    match unsafe { m.as_ref() }.map(|m| m.params.role) {
        Some(Role::Teacher) => 0,
        Some(Role::Coach) => 1,
        Some(Role::Student) => 2,
        None => -1,
    }
}

/// Number of scalar parameters, 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tcs_model_param_count(m: *const TcsModel) -> usize {
    unsafe { m.as_ref() }.map_or(0, |m| m.params.param_count())
}

/// # Safety
/// `m` must be NULL or a handle from [`tcs_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn tcs_model_free(m: *mut TcsModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Semantic logits of scene `index`, written as 3 × H × W row-major
/// values into `out` (capacity `len`).
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tcs_predict(
    m: *const TcsModel,
    ds: *const TcsDataset,
    index: usize,
    out: *mut f64,
    len: usize,
) -> TcsStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let d = unsafe { handle(ds, "dataset")? };
        if out.is_null() {
            return Err(fail(TcsStatus::NullPointer, "out is null"));
        }
        let scene = d.samples.get(index).ok_or_else(|| {
            fail(
                TcsStatus::InvalidArgument,
                format!("index {index} out of range for {} scenes", d.samples.len()),
            )
        })?;
        let logits = predict(&m.params, std::slice::from_ref(scene), 1).map_err(lib_err)?;
        let v = logits[0].values();
        if len != v.len() {
            return Err(fail(
                TcsStatus::Shape,
                format!(
                    "output holds {len} values, logits need {} ({NUM_CLASSES} x H x W)",
                    v.len()
                ),
            ));
        }
        // SAFETY: caller guarantees `len` writable doubles at `out`.
        unsafe { ptr::copy_nonoverlapping(v.as_ptr(), out, len) };
        Ok(())
    })
}

/// IoU and simplified AP of the model over the whole dataset.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcs_evaluate(
    m: *const TcsModel,
    ds: *const TcsDataset,
    out: *mut TcsMetrics,
) -> TcsStatus {
    guard(|| {
        let m = unsafe { handle(m, "model")? };
        let d = unsafe { handle(ds, "dataset")? };
        if out.is_null() {
            return Err(fail(TcsStatus::NullPointer, "out is null"));
        }
        let r = evaluate(&m.params, &d.samples, 8).map_err(lib_err)?;
        unsafe {
            *out = TcsMetrics {
                iou: r.iou,
                miou: r.miou,
                ap: r.ap,
                map: r.map,
            }
        };
        Ok(())
    })
}
