//! C ABI over the `tddan` library.
//!
//! Every fallible function returns a [`TddanStatus`]. On failure the message is
//! kept per thread and can be read with [`tddan_last_error_message`]. Handles
//! are opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tddan::nn::{Model, ModelKind};
use tddan::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TddanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfiguration = 3,
    DegenerateSource = 4,
    NumericalFailure = 5,
    EmptySpeaker = 6,
    InvalidState = 7,
    Unsupported = 8,
    Parse = 9,
    Io = 10,
    Panic = 11,
}

/// A loaded model.
pub struct TddanModel {
    model: Model,
}

/// Separated waveforms, one per speaker, all as long as the input mixture.
pub struct TddanSeparation {
    sources: Vec<Vec<f64>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TddanStatus {
    match e {
        Error::InvalidArgument(_) => TddanStatus::InvalidArgument,
        Error::InvalidConfiguration(_) => TddanStatus::InvalidConfiguration,
        Error::DegenerateSource(_) => TddanStatus::DegenerateSource,
        Error::NumericalFailure(_) => TddanStatus::NumericalFailure,
        Error::EmptySpeaker { .. } => TddanStatus::EmptySpeaker,
        Error::InvalidState(_) => TddanStatus::InvalidState,
        Error::Unsupported(_) => TddanStatus::Unsupported,
        Error::Parse { .. } | Error::Json(_) => TddanStatus::Parse,
        Error::Io { .. } => TddanStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TddanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TddanStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            TddanStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            TddanStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tddan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tddan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the `tddan train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tddan_model_load(path: *const c_char, out: *mut *mut TddanModel) -> TddanStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(TddanModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`tddan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tddan_model_free(model: *mut TddanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Audio sample rate the model was trained at, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tddan_model_sample_rate(model: *const TddanModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.config.sample_rate)
}

/// Separates `mixture` into `num_speakers` waveforms.
///
/// Attractor models cluster their embeddings with k-means seeded by `seed`.
/// Conv-TasNet produces its fixed number of outputs and rejects any other
/// `num_speakers`.
///
/// # Safety
/// `model` must be a live handle, `mixture` must point to `len` samples and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tddan_model_separate(
    model: *const TddanModel,
    mixture: *const f64,
    len: usize,
    num_speakers: usize,
    seed: u64,
    out: *mut *mut TddanSeparation,
) -> TddanStatus {
    guard(|| {
        let model = &model.as_ref().ok_or(Failure::Null("model"))?.model;
        let x = slice(mixture, len, "mixture")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if num_speakers == 0 {
            return Err(Error::InvalidArgument("num_speakers must be positive".into()).into());
        }
        let mut analysis = model.analyze(x)?;
        let sources = match model.config.model_kind {
            ModelKind::Tasnet => {
                let fixed = model.config.num_speakers;
                if fixed != num_speakers {
                    return Err(Error::Unsupported(format!("model separates {fixed} speakers, asked for {num_speakers}")).into());
                }
                analysis.separate(None)?
            }
            _ => {
                let a = analysis.kmeans_attractors(num_speakers, seed)?;
                analysis.separate(Some(&a))?
            }
        };
        *out = Box::into_raw(Box::new(TddanSeparation { sources }));
        Ok(())
    })
}

/// Number of separated waveforms, or 0 for a NULL handle.
///
/// # Safety
/// `sep` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tddan_separation_count(sep: *const TddanSeparation) -> usize {
    sep.as_ref().map_or(0, |s| s.sources.len())
}

/// Samples of waveform `index`, writing its length to `len`. Returns NULL
/// when the index is out of range. The data lives as long as the handle.
///
/// # Safety
/// `sep` must be a live handle and `len` NULL or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tddan_separation_source(sep: *const TddanSeparation, index: usize, len: *mut usize) -> *const f64 {
    let Some(src) = sep.as_ref().and_then(|s| s.sources.get(index)) else {
        set_error(format!("no separated source {index}"));
        return ptr::null();
    };
    if let Some(l) = len.as_mut() {
        *l = src.len();
    }
    src.as_ptr()
}

/// # Safety
/// `sep` must come from [`tddan_model_separate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tddan_separation_free(sep: *mut TddanSeparation) {
    if !sep.is_null() {
        drop(Box::from_raw(sep));
    }
}

/// Scale-invariant SDR in dB of `estimate` against `reference`.
///
/// # Safety
/// Both buffers must hold `len` samples and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tddan_si_sdr(estimate: *const f64, reference: *const f64, len: usize, out: *mut f64) -> TddanStatus {
    guard(|| {
        let (e, r) = (slice(estimate, len, "estimate")?, slice(reference, len, "reference")?);
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = tddan::metrics::si_sdr(e, r)?;
        Ok(())
    })
}

/// SDR in dB allowing a `filter_len`-tap distortion filter on the reference.
///
/// # Safety
/// Both buffers must hold `len` samples and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tddan_sdr(estimate: *const f64, reference: *const f64, len: usize, filter_len: usize, out: *mut f64) -> TddanStatus {
    guard(|| {
        let (e, r) = (slice(estimate, len, "estimate")?, slice(reference, len, "reference")?);
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = tddan::metrics::sdr_projective(e, r, filter_len)?;
        Ok(())
    })
}
