//! C ABI over the holter pipeline.
//!
//! Every fallible function returns a [`HolterStatus`]; on failure the
//! message is available from [`holter_last_error`] on the same thread.
//! Objects are opaque handles created by `*_new`/`*_read`/`*_load`
//! functions and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use holter::config::PipelineConfig;
use holter::pipeline::{predict_raw, Models};
use holter::seg::detect_pan_tompkins;
use holter::signal_io::{read_record, write_annotations, BeatAnnotation, BeatClass, EcgRecord};
use holter::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HolterStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Model = 6,
    Dataset = 7,
    Panic = 8,
}

/// A multi-channel ECG record.
pub struct HolterRecord(EcgRecord);

/// Loaded models plus the configuration they run with.
pub struct HolterPipeline {
    models: Models,
    config: PipelineConfig,
}

/// Beat positions with wide/narrow labels.
pub struct HolterAnnotation(BeatAnnotation);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> HolterStatus {
    match e {
        Error::Io(_) => HolterStatus::Io,
        Error::InvalidHeader(_)
        | Error::LengthMismatch { .. }
        | Error::InvalidRecord(_)
        | Error::Annotation { .. }
        | Error::Descriptor { .. }
        | Error::Format212(_)
        | Error::Json(_)
        | Error::Csv(_) => HolterStatus::Format,
        Error::Config(_) => HolterStatus::Config,
        Error::Shape(_) | Error::Checkpoint(_) | Error::Model(_) => HolterStatus::Model,
        Error::Dataset(_) => HolterStatus::Dataset,
    }
}

enum Failure {
    Status(HolterStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HolterStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HolterStatus::Ok
        }
        Ok(Err(Failure::Status(s, m))) => {
            set_error(m);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            HolterStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(HolterStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Status(HolterStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(out: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Failure> {
    out.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn holter_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn holter_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a record file written by the `holter` tools.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn holter_record_read(path: *const c_char, out: *mut *mut HolterRecord) -> HolterStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let rec = read_record(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(HolterRecord(rec)));
        Ok(())
    })
}

/// Builds a record from channel-major samples in millivolts:
/// `data[c * n_samples + i]` is sample `i` of channel `c`.
///
/// # Safety
/// `data` must point to `n_channels * n_samples` floats, `record_id` must be
/// NUL-terminated (or null for an empty id) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn holter_record_new(
    record_id: *const c_char,
    fs: f64,
    n_channels: usize,
    n_samples: usize,
    data: *const f32,
    out: *mut *mut HolterRecord,
) -> HolterStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if data.is_null() && n_channels * n_samples > 0 {
            return Err(null("data"));
        }
        let id =
            if record_id.is_null() { String::new() } else { path_arg(record_id, "record_id")?.to_string_lossy().into_owned() };
        let total = n_channels
            .checked_mul(n_samples)
            .ok_or_else(|| Failure::Status(HolterStatus::InvalidArgument, "record size overflows".into()))?;
        let flat: &[f32] = if total == 0 { &[] } else { std::slice::from_raw_parts(data, total) };
        let channels = (0..n_channels).map(|c| flat[c * n_samples..(c + 1) * n_samples].to_vec()).collect();
        *out = Box::into_raw(Box::new(HolterRecord(EcgRecord::new(id, fs, channels)?)));
        Ok(())
    })
}

/// # Safety
/// `record` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn holter_record_free(record: *mut HolterRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

/// Sampling rate in Hz, or 0 for a null handle.
///
/// # Safety
/// `record` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn holter_record_fs(record: *const HolterRecord) -> f64 {
    record.as_ref().map_or(0.0, |r| r.0.fs)
}

/// # Safety
/// `record` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn holter_record_n_samples(record: *const HolterRecord) -> usize {
    record.as_ref().map_or(0, |r| r.0.n_samples())
}

/// # Safety
/// `record` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn holter_record_n_channels(record: *const HolterRecord) -> usize {
    record.as_ref().map_or(0, |r| r.0.n_channels())
}

/// Loads the segmentation and classifier checkpoints and, optionally, a
/// GBDT model file and a JSON configuration (null for defaults).
///
/// # Safety
/// Non-null string arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn holter_pipeline_load(
    seg_path: *const c_char,
    cls_path: *const c_char,
    gbdt_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut HolterPipeline,
) -> HolterStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let seg = path_arg(seg_path, "seg_path")?;
        let cls = path_arg(cls_path, "cls_path")?;
        let gbdt = if gbdt_path.is_null() { None } else { Some(path_arg(gbdt_path, "gbdt_path")?) };
        let config = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(path_arg(config_path, "config_path")?)?
        };
        let models = Models::load(seg, cls, gbdt.as_deref())?;
        *out = Box::into_raw(Box::new(HolterPipeline { models, config }));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn holter_pipeline_free(pipeline: *mut HolterPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs all stages on a raw record; positions refer to the record's rate.
///
/// # Safety
/// Handles must be valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn holter_pipeline_run(
    pipeline: *const HolterPipeline,
    record: *const HolterRecord,
    out: *mut *mut HolterAnnotation,
) -> HolterStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = handle(pipeline, "pipeline")?;
        let r = handle(record, "record")?;
        let pred = predict_raw(&p.models, &r.0, &p.config)?;
        *out = Box::into_raw(Box::new(HolterAnnotation(pred.final_annotation().rescaled(r.0.fs))));
        Ok(())
    })
}

/// Pan–Tompkins beat positions on the first channel (all labelled narrow).
///
/// # Safety
/// `record` must be valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn holter_detect_pan_tompkins(
    record: *const HolterRecord,
    out: *mut *mut HolterAnnotation,
) -> HolterStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = handle(record, "record")?;
        *out = Box::into_raw(Box::new(HolterAnnotation(detect_pan_tompkins(&r.0, &Default::default()))));
        Ok(())
    })
}

/// # Safety
/// `ann` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn holter_annotation_free(ann: *mut HolterAnnotation) {
    if !ann.is_null() {
        drop(Box::from_raw(ann));
    }
}

/// Number of beats, or 0 for a null handle.
///
/// # Safety
/// `ann` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn holter_annotation_len(ann: *const HolterAnnotation) -> usize {
    ann.as_ref().map_or(0, |a| a.0.len())
}

/// Copies beat positions (sample indices) and labels (0 narrow, 1 wide)
/// into caller buffers of `capacity` entries; either buffer may be null.
///
/// # Safety
/// Non-null buffers must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn holter_annotation_copy(
    ann: *const HolterAnnotation,
    positions: *mut u64,
    labels: *mut u8,
    capacity: usize,
) -> HolterStatus {
    guard(|| {
        let a = &handle(ann, "ann")?.0;
        if capacity < a.len() {
            return Err(Failure::Status(HolterStatus::InvalidArgument, format!("capacity {capacity} below {} beats", a.len())));
        }
        for (i, (&p, &l)) in a.positions.iter().zip(&a.labels).enumerate() {
            if !positions.is_null() {
                *positions.add(i) = p as u64;
            }
            if !labels.is_null() {
                *labels.add(i) = u8::from(l == BeatClass::Wide);
            }
        }
        Ok(())
    })
}

/// Writes the annotation CSV, one `sample_index,label` row per beat.
///
/// # Safety
/// `ann` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn holter_annotation_write(ann: *const HolterAnnotation, path: *const c_char) -> HolterStatus {
    guard(|| {
        let a = handle(ann, "ann")?;
        write_annotations(&a.0, path_arg(path, "path")?)?;
        Ok(())
    })
}
