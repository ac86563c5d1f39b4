//! C ABI for loading a trained checkpoint and extracting key-value pairs.
//!
//! Every fallible call returns a [`KvpStatus`]; on failure the message is
//! available from [`kvp_last_error_message`] on the same thread. Strings
//! returned through out-parameters are owned by the caller and released
//! with [`kvp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kvpformer::cli::{Checkpoint, CheckpointError};
use kvpformer::data::parse_funsd_str;
use kvpformer::geometry::{spatial_compatibility, BBox, SPATIAL_FEATURE_DIM};
use kvpformer::model::{KvpFormer, ModelError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Model = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// A loaded model. Opaque to C.
pub struct KvpModel {
    inner: KvpFormer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: KvpStatus, message: impl Into<String>) -> KvpStatus {
    set_error(message);
    status
}

/// Runs `f`, turning a panic into `KvpStatus::Panic`.
fn guard(f: impl FnOnce() -> KvpStatus) -> KvpStatus {
    clear_error();
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(KvpStatus::Panic, "internal panic"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, KvpStatus> {
    if p.is_null() {
        return Err(fail(KvpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KvpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn kvp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kvp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `kvpformer train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` receives a model to release with [`kvp_model_free`].
#[no_mangle]
pub unsafe extern "C" fn kvp_model_load(path: *const c_char, out: *mut *mut KvpModel) -> KvpStatus {
    guard(|| {
        if out.is_null() {
            return fail(KvpStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let model = match Checkpoint::load(Path::new(path)).and_then(Checkpoint::into_model) {
            Ok(m) => m,
            Err(e @ CheckpointError::Io { .. }) => return fail(KvpStatus::Io, e.to_string()),
            Err(e @ CheckpointError::Model(_)) => return fail(KvpStatus::Model, e.to_string()),
            Err(e) => return fail(KvpStatus::Checkpoint, e.to_string()),
        };
        *out = Box::into_raw(Box::new(KvpModel { inner: model }));
        KvpStatus::Ok
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`kvp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kvp_model_free(model: *mut KvpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts pairs for one document in the annotation JSON schema.
///
/// `*out_json` receives `{"pairs": [[key_id, value_id], ...], "labels":
/// {"<entity id>": "<label>", ...}}`, to release with [`kvp_string_free`].
///
/// # Safety
/// `model` must be a live model; `doc_id` and `annotation_json` must be
/// NUL-terminated strings; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvp_model_predict(
    model: *const KvpModel,
    doc_id: *const c_char,
    annotation_json: *const c_char,
    out_json: *mut *mut c_char,
) -> KvpStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(KvpStatus::NullPointer, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let Some(model) = model.as_ref() else {
            return fail(KvpStatus::NullPointer, "model is null");
        };
        let (id, json) = match (read_str(doc_id, "doc_id"), read_str(annotation_json, "annotation_json")) {
            (Ok(i), Ok(j)) => (i, j),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let doc = match parse_funsd_str(id, json) {
            Ok(d) => d,
            Err(e) => return fail(KvpStatus::Parse, e.to_string()),
        };
        let prediction = match model.inner.predict(&doc) {
            Ok(p) => p,
            Err(e @ ModelError::EmptyDocument(_)) => return fail(KvpStatus::InvalidArgument, e.to_string()),
            Err(e) => return fail(KvpStatus::Model, e.to_string()),
        };
        let labels: serde_json::Map<String, serde_json::Value> = doc
            .entities
            .iter()
            .zip(&prediction.predicted_labels)
            .map(|(e, l)| (e.id.to_string(), l.as_str().into()))
            .collect();
        let pairs: Vec<[usize; 2]> = prediction.pairs.iter().map(|p| [p.key_id, p.value_id]).collect();
        let text = serde_json::json!({ "pairs": pairs, "labels": labels }).to_string();
        match CString::new(text) {
            Ok(s) => {
                *out_json = s.into_raw();
                KvpStatus::Ok
            }
            Err(_) => fail(KvpStatus::Model, "output contained a NUL byte"),
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kvp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes the 18-value spatial compatibility feature of two boxes given as
/// `[x1, y1, x2, y2]` on the 0..1000 grid. Coordinates are reordered and
/// clamped the same way the model does.
///
/// # Safety
/// `a` and `b` must point to 4 readable `int32_t`, `out` to 18 writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn kvp_spatial_compatibility(a: *const i32, b: *const i32, out: *mut f64) -> KvpStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(KvpStatus::NullPointer, "box or output pointer is null");
        }
        let a = std::slice::from_raw_parts(a, 4);
        let b = std::slice::from_raw_parts(b, 4);
        let r = spatial_compatibility(&BBox::new(a[0], a[1], a[2], a[3]), &BBox::new(b[0], b[1], b[2], b[3]));
        std::slice::from_raw_parts_mut(out, SPATIAL_FEATURE_DIM).copy_from_slice(r.as_slice());
        KvpStatus::Ok
    })
}
