//! C ABI over `pcl-core`.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`PclStatus`]; on failure a
//! message for the calling thread is available from
//! [`pcl_last_error_message`]. Settings are passed as JSON strings using the
//! same field names as the CLI config files; a null pointer means defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pcl_core::datagen::{generate_synthetic, load_dataset, save_dataset, DatasetManifest, GenConfig};
use pcl_core::metrics::evaluate;
use pcl_core::model::ModelParams;
use pcl_core::trainer::{train, TrainConfig};
use pcl_core::{BBox, PclError};
use serde::de::DeserializeOwned;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PclStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Parse = 6,
    Panic = 7,
}

/// A loaded or generated dataset.
pub struct PclDataset {
    inner: DatasetManifest,
}

/// Trained model parameters.
pub struct PclModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PclError) -> PclStatus {
    match e {
        PclError::Config(_) | PclError::Version { .. } => PclStatus::Config,
        PclError::Data(_) | PclError::InvalidBox { .. } => PclStatus::Data,
        PclError::Parse { .. } | PclError::Json(_) => PclStatus::Parse,
        PclError::Io { .. } => PclStatus::Io,
    }
}

struct Failure(PclStatus, String);

impl From<PclError> for Failure {
    fn from(e: PclError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PclStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PclStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PclStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PclStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn json_arg<T: Default + DeserializeOwned>(p: *const c_char, what: &str) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let text = str_arg(p, what)?;
    serde_json::from_str(text).map_err(|e| Failure(PclStatus::Parse, format!("{what}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pcl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates a synthetic dataset from generator settings in JSON.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_generate(config_json: *const c_char, out: *mut *mut PclDataset) -> PclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg: GenConfig = json_arg(config_json, "config_json")?;
        let inner = generate_synthetic(&cfg)?;
        *out = Box::into_raw(Box::new(PclDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_load(path: *const c_char, out: *mut *mut PclDataset) -> PclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = load_dataset(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PclDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_save(dataset: *const PclDataset, path: *const c_char) -> PclStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&ds.inner, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of images, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_num_images(dataset: *const PclDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.images.len())
}

/// Number of object classes, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_num_classes(dataset: *const PclDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// # Safety
/// `dataset` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcl_dataset_free(dataset: *mut PclDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model on every image of `dataset` with settings in JSON.
///
/// # Safety
/// `dataset` is a live handle; `config_json` is null or a NUL-terminated
/// string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_train(
    dataset: *const PclDataset,
    config_json: *const c_char,
    out: *mut *mut PclModel,
) -> PclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let cfg: TrainConfig = json_arg(config_json, "config_json")?;
        let result = train(&ds.inner.training_view(), ds.inner.num_classes(), &cfg)?;
        *out = Box::into_raw(Box::new(PclModel {
            inner: result.state.params,
        }));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_model_load(path: *const c_char, out: *mut *mut PclModel) -> PclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = ModelParams::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PclModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pcl_model_save(model: *const PclModel, path: *const c_char) -> PclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of refined streams, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcl_model_num_refinements(model: *const PclModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.refine.len())
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcl_model_free(model: *mut PclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates `model` on `dataset`. Writes mAP and mean CorLoc (NaN when
/// undefined) and, if `report_json` is non-null, the full report as a string
/// to be released with [`pcl_string_free`].
///
/// # Safety
/// Handles are live; `map` and `corloc` are writable; `report_json` is null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_evaluate(
    model: *const PclModel,
    dataset: *const PclDataset,
    nms_threshold: f64,
    map: *mut f64,
    corloc: *mut f64,
    report_json: *mut *mut c_char,
) -> PclStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let map = out_arg(map, "map")?;
        let corloc = out_arg(corloc, "corloc")?;
        if !(nms_threshold > 0.0 && nms_threshold <= 1.0) {
            return Err(Failure(
                PclStatus::Config,
                format!("NMS threshold {nms_threshold} not in (0, 1]"),
            ));
        }
        let (report, _) = evaluate(&m.inner, &ds.inner, nms_threshold)?;
        *map = report.map.unwrap_or(f64::NAN);
        *corloc = report.mean_corloc.unwrap_or(f64::NAN);
        if let Some(slot) = report_json.as_mut() {
            let text = serde_json::to_string(&report).map_err(PclError::from)?;
            *slot = CString::new(text).unwrap_or_default().into_raw();
        }
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` point to four doubles each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pcl_iou(a: *const f64, b: *const f64, out: *mut f64) -> PclStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if a.is_null() || b.is_null() {
            return Err(null("box"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, 4), std::slice::from_raw_parts(b, 4));
        let a = BBox::new(a[0], a[1], a[2], a[3])?;
        let b = BBox::new(b[0], b[1], b[2], b[3])?;
        *out = pcl_core::iou(&a, &b);
        Ok(())
    })
}
