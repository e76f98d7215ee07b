//! C ABI over the `dcrec` toolkit.
//!
//! Every function returns a [`DcrecStatus`]; results come back through out
//! pointers. Datasets and models are opaque heap handles released with their
//! `_free` functions. On failure, [`dcrec_last_error`] returns a message for
//! the calling thread. Strings handed out by the library must be released
//! with [`dcrec_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dcrec::checkpoint::Checkpoint;
use dcrec::config::TrainConfig;
use dcrec::dataio::{ingest, prepare, synthesize, IdMap, InputFormat, SplitDataset, SyntheticSpec};
use dcrec::evaluation::{evaluate, Stage};
use dcrec::model::Snapshot;
use dcrec::trainer::{restore, train};
use dcrec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Runtime = 6,
    Panic = 7,
}

/// Stage selector for [`dcrec_evaluate`].
pub const DCREC_STAGE_VALID: i32 = 0;
pub const DCREC_STAGE_TEST: i32 = 1;

/// A prepared leave-one-out dataset.
pub struct DcrecDataset {
    split: SplitDataset,
    ids: IdMap,
}

/// A trained model bound to the dataset it was trained or loaded against.
pub struct DcrecModel {
    checkpoint: Checkpoint,
    snapshot: Snapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(DcrecStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DcrecStatus::Io,
            Error::Parse { .. } | Error::Json(_) => DcrecStatus::Parse,
            Error::Config(_) => DcrecStatus::Config,
            Error::InvalidArgument(_) | Error::Domain(_) => DcrecStatus::InvalidArgument,
            _ => DcrecStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DcrecStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DcrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcrecStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcrecStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DcrecStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn check_lengths(t_max: usize, min_length: usize) -> Result<(), Failure> {
    if t_max == 0 || min_length == 0 {
        return Err(Failure(DcrecStatus::InvalidArgument, "t_max and min_length must be positive".into()));
    }
    Ok(())
}

/// Load a `user<TAB>item<TAB>timestamp` file and split it leave-one-out.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_dataset_load(
    path: *const c_char,
    t_max: usize,
    min_length: usize,
    out: *mut *mut DcrecDataset,
) -> DcrecStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        check_lengths(t_max, min_length)?;
        let log = ingest(&path, InputFormat::Tsv)?;
        let split = prepare(&log, t_max, min_length)?;
        put(out, DcrecDataset { split, ids: log.id_map })
    })
}

/// Generate a synthetic corpus in memory and split it leave-one-out.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_dataset_synthesize(
    users: usize,
    items: usize,
    mean_length: usize,
    conformity_fraction: f64,
    zipf_exponent: f64,
    seed: u64,
    t_max: usize,
    min_length: usize,
    out: *mut *mut DcrecDataset,
) -> DcrecStatus {
    guard(|| {
        check_lengths(t_max, min_length)?;
        let spec = SyntheticSpec {
            user_count: users,
            item_count: items,
            mean_length,
            conformity_fraction,
            popularity_exponent: zipf_exponent,
            seed,
        };
        let log = synthesize(&spec)?.log;
        let split = prepare(&log, t_max, min_length)?;
        put(out, DcrecDataset { split, ids: log.id_map })
    })
}

/// Number of real items; item tokens run from 1 to this value.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_dataset_catalog_size(dataset: *const DcrecDataset, out: *mut usize) -> DcrecStatus {
    guard(|| {
        let ds = borrow(dataset, "dataset")?;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = ds.split.catalog_size;
        Ok(())
    })
}

/// Number of users kept after filtering.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_dataset_user_count(dataset: *const DcrecDataset, out: *mut usize) -> DcrecStatus {
    guard(|| {
        let ds = borrow(dataset, "dataset")?;
        *out.as_mut().ok_or_else(|| null("output pointer"))? = ds.split.train_sequences.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcrec_dataset_free(dataset: *mut DcrecDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Train on `dataset`. `config_text` holds `key = value` lines (null for
/// defaults); `out_dir` (nullable) receives checkpoint, metrics and loss log.
///
/// # Safety
/// Pointers must be valid; string arguments NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dcrec_train(
    dataset: *const DcrecDataset,
    config_text: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut DcrecModel,
) -> DcrecStatus {
    guard(|| {
        let ds = borrow(dataset, "dataset")?;
        let config = if config_text.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::from_text(str_arg(config_text, "config_text")?)?
        };
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(str_arg(out_dir, "out_dir")?)) };
        let outcome = train(&config, &ds.split, &ds.ids, dir.as_deref())?;
        let snapshot = restore(&outcome.checkpoint, &ds.split)?;
        put(out, DcrecModel { checkpoint: outcome.checkpoint, snapshot })
    })
}

/// Load a checkpoint and bind it to `dataset`, which must carry the same ids
/// the model was trained with.
///
/// # Safety
/// Pointers must be valid; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dcrec_model_load(
    path: *const c_char,
    dataset: *const DcrecDataset,
    out: *mut *mut DcrecModel,
) -> DcrecStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let ds = borrow(dataset, "dataset")?;
        let checkpoint = Checkpoint::load(&path)?;
        if checkpoint.id_map != ds.ids {
            return Err(Failure(DcrecStatus::Runtime, "dataset ids do not match the checkpoint".into()));
        }
        let snapshot = restore(&checkpoint, &ds.split)?;
        put(out, DcrecModel { checkpoint, snapshot })
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dcrec_model_save(model: *const DcrecModel, path: *const c_char) -> DcrecStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(m.checkpoint.save(&path)?)
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcrec_model_free(model: *mut DcrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluate on the validation (0) or test (1) stage; `out_json` receives a
/// metrics document to release with [`dcrec_string_free`].
///
/// # Safety
/// Handles must be live and `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn dcrec_evaluate(
    model: *const DcrecModel,
    dataset: *const DcrecDataset,
    stage: i32,
    out_json: *mut *mut c_char,
) -> DcrecStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let ds = borrow(dataset, "dataset")?;
        let stage = match stage {
            DCREC_STAGE_VALID => Stage::Valid,
            DCREC_STAGE_TEST => Stage::Test,
            other => return Err(Failure(DcrecStatus::InvalidArgument, format!("unknown stage {other}"))),
        };
        if m.checkpoint.id_map != ds.ids {
            return Err(Failure(DcrecStatus::Runtime, "dataset ids do not match the model".into()));
        }
        let report = evaluate(&m.snapshot, &ds.split, stage)?;
        let text = serde_json::to_string(&report).map_err(Error::from)?;
        if out_json.is_null() {
            return Err(null("output pointer"));
        }
        *out_json = CString::new(text).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// Score every item for one history of item tokens (1-based). Writes
/// `catalog_size` scores into `scores`; entry `j` is the score of token `j+1`.
///
/// # Safety
/// `history` must point to `history_len` tokens and `scores` to `capacity`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dcrec_score_user(
    model: *const DcrecModel,
    history: *const usize,
    history_len: usize,
    scores: *mut f64,
    capacity: usize,
) -> DcrecStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        if history.is_null() || scores.is_null() {
            return Err(null("history or scores"));
        }
        let n = m.snapshot.catalog_size();
        if capacity < n {
            return Err(Failure(DcrecStatus::InvalidArgument, format!("scores buffer holds {capacity}, need {n}")));
        }
        let hist = std::slice::from_raw_parts(history, history_len);
        if hist.is_empty() || hist.iter().any(|&t| t == 0 || t > n) {
            return Err(Failure(DcrecStatus::InvalidArgument, format!("history tokens must lie in 1..={n}")));
        }
        let tail = &hist[hist.len().saturating_sub(m.checkpoint.config.t_max)..];
        let s = m.snapshot.score(&[tail])?;
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(s.row(0).as_slice().expect("contiguous row"));
        Ok(())
    })
}

/// Positive-sample contribution curve at similarity `p`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_f1(p: f64, tau: f64, out: *mut f64) -> DcrecStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("output pointer"))? = dcrec::theory::f1(p, tau)?;
        Ok(())
    })
}

/// Negative-sample contribution curve at similarity `n`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dcrec_f2(n: f64, tau: f64, out: *mut f64) -> DcrecStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("output pointer"))? = dcrec::theory::f2(n, tau)?;
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dcrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcrec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dcrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
