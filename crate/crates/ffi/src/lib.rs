//! C interface.
//!
//! Every function returns an [`AttenlabStatus`]; on failure the message is
//! available from [`attenlab_last_error`] on the same thread until the next
//! call. Models are opaque handles released with [`attenlab_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use attenlab::data::Raster;
use attenlab::evaluation::{auc, clopper_pearson};
use attenlab::model::{load_checkpoint, Model};
use attenlab::training::batch_tensor;
use attenlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttenlabStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Contract = 3,
    Numeric = 4,
    Format = 5,
    Config = 6,
    Input = 7,
    Io = 8,
    /// A bug: the call panicked.
    Internal = 9,
}

/// Opaque model handle.
pub struct AttenlabModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AttenlabStatus {
    match e {
        Error::Dimension(_) => AttenlabStatus::Dimension,
        Error::Contract(_) => AttenlabStatus::Contract,
        Error::Numeric(_) => AttenlabStatus::Numeric,
        Error::Format { .. } => AttenlabStatus::Format,
        Error::Config(_) => AttenlabStatus::Config,
        Error::Input(_) => AttenlabStatus::Input,
        Error::Io { .. } => AttenlabStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AttenlabStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AttenlabStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            AttenlabStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AttenlabStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn attenlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn attenlab_model_load(path: *const c_char, out: *mut *mut AttenlabModel) -> AttenlabStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::Input("path is not UTF-8".into()))?;
        let model = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(AttenlabModel { model }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`attenlab_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn attenlab_model_free(model: *mut AttenlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn attenlab_model_classes(model: *const AttenlabModel, out: *mut usize) -> AttenlabStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config().classes;
        Ok(())
    })
}

/// Side length images are resized to before inference.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn attenlab_model_input_size(model: *const AttenlabModel, out: *mut usize) -> AttenlabStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.config().input_size;
        Ok(())
    })
}

/// Class probabilities for one interleaved 8-bit RGB image of
/// `width*height*3` bytes. `probs` receives `probs_len` values, which must
/// equal the class count.
///
/// # Safety
/// `rgb` must hold `width*height*3` bytes and `probs` room for `probs_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn attenlab_model_predict_rgb(
    model: *const AttenlabModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    probs: *mut f64,
    probs_len: usize,
) -> AttenlabStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(rgb, "rgb")?;
        non_null(probs, "probs")?;
        let model = &(*model).model;
        let k = model.config().classes;
        if probs_len != k {
            return Err(Error::Dimension(format!("probs_len {probs_len}, model has {k} classes")).into());
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Dimension("image size overflows".into()))?;
        let raster = Raster::new(width, height, std::slice::from_raw_parts(rgb, len).to_vec())?;
        let x = batch_tensor(&[&raster], model.config().input_size)?;
        let p = model.predict(&x)?;
        std::slice::from_raw_parts_mut(probs, k).copy_from_slice(p.data());
        Ok(())
    })
}

/// Exact binomial interval for `k` successes out of `n` at confidence `conf`.
///
/// # Safety
/// `lo` and `hi` must be valid.
#[no_mangle]
pub unsafe extern "C" fn attenlab_clopper_pearson(
    k: usize,
    n: usize,
    conf: f64,
    lo: *mut f64,
    hi: *mut f64,
) -> AttenlabStatus {
    guard(|| {
        non_null(lo, "lo")?;
        non_null(hi, "hi")?;
        let (a, b) = clopper_pearson(k, n, conf)?;
        *lo = a;
        *hi = b;
        Ok(())
    })
}

/// Area under the ROC curve; `labels[i]` nonzero marks a positive.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn attenlab_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> AttenlabStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(labels, "labels")?;
        non_null(out, "out")?;
        let scores = std::slice::from_raw_parts(scores, n);
        let labels: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&l| l != 0).collect();
        *out = auc(scores, &labels)?;
        Ok(())
    })
}
