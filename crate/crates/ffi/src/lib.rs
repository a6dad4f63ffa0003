//! C ABI over the `fusionette` crate.
//!
//! Models and datasets cross the boundary as opaque handles created by a
//! `*_load`/`*_init`/`*_read` call and released with the matching `*_free`.
//! Every fallible call returns a [`FusionetteStatus`]; on failure
//! [`fusionette_last_error`] describes the most recent error on the calling
//! thread.
//!
//! Handles are not synchronized. A model handle may be shared between
//! threads for prediction only if the caller guarantees no concurrent
//! `fusionette_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fusionette::data::{read_split, DatasetSplit, EmbeddingRecord};
use fusionette::fusion::{VariantName, VariantSpec};
use fusionette::metrics::evaluate;
use fusionette::model::{load_model, save_model, Model};
use fusionette::Error;

/// Result of every fallible call. Codes 2-7 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionetteStatus {
    Ok = 0,
    /// Null pointer, non-UTF-8 string or wrong buffer length.
    InvalidArgument = 1,
    InvalidConfig = 2,
    UnknownVariant = 3,
    Format = 4,
    Dimension = 5,
    Training = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 10,
}

/// Headline metrics of an evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FusionetteMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub n_samples: u64,
}

/// Opaque trained or freshly initialized model.
pub struct FusionetteModel {
    inner: Model,
}

/// Opaque dataset split read from an MMEB file.
pub struct FusionetteSplit {
    inner: DatasetSplit,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

fn status_of(err: &Error) -> FusionetteStatus {
    match err {
        Error::UnknownVariant(_) => FusionetteStatus::UnknownVariant,
        Error::Format(_) | Error::Json(_) => FusionetteStatus::Format,
        Error::Shape { .. } | Error::Dimension(_) | Error::LabelOutOfRange { .. } => FusionetteStatus::Dimension,
        Error::InvalidConfig(_) => FusionetteStatus::InvalidConfig,
        Error::EmptySplit(_) | Error::UnknownCategory { .. } | Error::NonScalarLoss(_) | Error::MissingGrad(_) => {
            FusionetteStatus::Training
        }
        Error::Io(_) => FusionetteStatus::Io,
    }
}

enum Failure {
    Arg(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FusionetteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            FusionetteStatus::Ok
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_last_error(msg);
            FusionetteStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            FusionetteStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{what} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Rejects a null out-pointer and clears the slot it points to.
unsafe fn out_arg<T>(p: *mut *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    *p = ptr::null_mut();
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fusionette_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next fusionette call on the same thread.
#[no_mangle]
pub extern "C" fn fusionette_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialized model for `variant` with default
/// architecture settings.
///
/// # Safety
/// `variant` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_init(
    variant: *const c_char,
    dim_image: usize,
    dim_text: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut FusionetteModel,
) -> FusionetteStatus {
    guard(|| {
        out_arg(out, "out")?;
        let name: VariantName = str_arg(variant, "variant")?.parse()?;
        let model = Model::init(VariantSpec::new(name, dim_image, dim_text, num_classes), seed)?;
        *out = Box::into_raw(Box::new(FusionetteModel { inner: model }));
        Ok(())
    })
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_load(
    path: *const c_char,
    out: *mut *mut FusionetteModel,
) -> FusionetteStatus {
    guard(|| {
        out_arg(out, "out")?;
        let model = load_model(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FusionetteModel { inner: model }));
        Ok(())
    })
}

/// Writes `model` to `path`.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_save(model: *const FusionetteModel, path: *const c_char) -> FusionetteStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        save_model(&model.inner, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_free(model: *mut FusionetteModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image width, text width and class count of `model`.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_dims(
    model: *const FusionetteModel,
    dim_image: *mut usize,
    dim_text: *mut usize,
    num_classes: *mut usize,
) -> FusionetteStatus {
    guard(|| {
        let spec = ref_arg(model, "model")?.inner.spec();
        for (p, v) in [
            (dim_image, spec.dim_image),
            (dim_text, spec.dim_text),
            (num_classes, spec.num_classes),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predicts one record. `probs` receives `probs_len` class probabilities
/// (`probs_len` must equal the class count); `class_out` the argmax.
///
/// # Safety
/// Input arrays must hold the stated number of `double`s; `probs` must be
/// writable for `probs_len` values; `class_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn fusionette_model_predict(
    model: *const FusionetteModel,
    image: *const f64,
    image_len: usize,
    text: *const f64,
    text_len: usize,
    probs: *mut f64,
    probs_len: usize,
    class_out: *mut usize,
) -> FusionetteStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner;
        let c = model.spec().num_classes;
        if probs.is_null() || probs_len != c {
            return Err(Failure::Arg(format!("probs must hold exactly {c} values")));
        }
        let rec = EmbeddingRecord {
            id: String::new(),
            f_i: slice_arg(image, image_len, "image")?.to_vec(),
            f_t: slice_arg(text, text_len, "text")?.to_vec(),
            label: 0,
        };
        let pred = model.predict(&rec)?;
        std::slice::from_raw_parts_mut(probs, c).copy_from_slice(&pred.probs);
        if let Some(p) = class_out.as_mut() {
            *p = pred.class;
        }
        Ok(())
    })
}

/// Reads an MMEB split file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fusionette_split_read(
    path: *const c_char,
    out: *mut *mut FusionetteSplit,
) -> FusionetteStatus {
    guard(|| {
        out_arg(out, "out")?;
        let split = read_split(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FusionetteSplit { inner: split }));
        Ok(())
    })
}

/// Releases a split handle. Null is ignored.
///
/// # Safety
/// `split` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fusionette_split_free(split: *mut FusionetteSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

/// Number of records in `split`, or 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionette_split_len(split: *const FusionetteSplit) -> usize {
    split.as_ref().map_or(0, |s| s.inner.len())
}

/// Class count of `split`, or 0 for a null handle.
///
/// # Safety
/// `split` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fusionette_split_num_classes(split: *const FusionetteSplit) -> usize {
    split.as_ref().map_or(0, |s| s.inner.num_classes)
}

/// Scores `model` on every record of `split`.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fusionette_evaluate(
    model: *const FusionetteModel,
    split: *const FusionetteSplit,
    out: *mut FusionetteMetrics,
) -> FusionetteStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.inner;
        let split = &ref_arg(split, "split")?.inner;
        let out = out.as_mut().ok_or_else(|| Failure::Arg("out is null".into()))?;
        let spec = model.spec();
        if (spec.dim_image, spec.dim_text) != (split.dim_image, split.dim_text) {
            return Err(Error::Dimension(format!(
                "model expects widths {}/{}, split has {}/{}",
                spec.dim_image, spec.dim_text, split.dim_image, split.dim_text
            ))
            .into());
        }
        let r = evaluate(model, split)?;
        *out = FusionetteMetrics {
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            weighted_f1: r.weighted_f1,
            n_samples: r.n_samples,
        };
        Ok(())
    })
}
