//! C ABI over the `tagg` library.
//!
//! Every function returns a [`TaggStatus`]; on failure the message is kept
//! per thread and read back with [`tagg_last_error`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tagg::heads::ensemble_infer;
use tagg::io;
use tagg::snippets::{FrameSequence, SnippetBank};
use tagg::train::TrainState;
use tagg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaggStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Dimension = 6,
    Grammar = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained model with its run configuration.
pub struct TaggModel {
    state: TrainState,
}

/// A frame sequence read from a feature file.
pub struct TaggSequence {
    seq: FrameSequence,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TaggStatus {
    match e {
        Error::Dimension { .. } => TaggStatus::Dimension,
        Error::Argument(_) => TaggStatus::InvalidArgument,
        Error::Config(_) => TaggStatus::Config,
        Error::Grammar { .. } => TaggStatus::Grammar,
        Error::Format { .. } => TaggStatus::Format,
        Error::Io { .. } => TaggStatus::Io,
    }
}

struct Fail(TaggStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TaggStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TaggStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside tagg".into());
            TaggStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TaggStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(TaggStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn tagg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tagg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tagg_model_load(path: *const c_char, out: *mut *mut TaggModel) -> TaggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = io::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TaggModel { state }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `tagg_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tagg_model_free(model: *mut TaggModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tagg_model_save(model: *const TaggModel, path: *const c_char) -> TaggStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        io::save_checkpoint(&path_arg(path)?, &m.state)?;
        Ok(())
    })
}

/// Writes the checkpoint SHA-256 as 64 hex characters plus NUL; `cap` must be at least 65.
///
/// # Safety
/// `model` must be a live handle and `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn tagg_model_hash(model: *const TaggModel, buf: *mut c_char, cap: usize) -> TaggStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let hex = io::hash_hex(&io::checkpoint_bytes(&m.state)?);
        if cap < hex.len() + 1 {
            return Err(Fail(TaggStatus::BufferTooSmall, format!("need {} bytes", hex.len() + 1)));
        }
        ptr::copy_nonoverlapping(hex.as_ptr().cast::<c_char>(), buf, hex.len());
        *buf.add(hex.len()) = 0;
        Ok(())
    })
}

/// Action vocabulary size of the model.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn tagg_model_num_actions(model: *const TaggModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.model.shape().n_actions)
}

/// Per-frame feature width the model expects.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn tagg_model_input_dim(model: *const TaggModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.model.shape().input_dim)
}

/// Next-action scores after observing frames `0..=t` of a `n_frames x dim`
/// row-major feature buffer. Writes `num_actions` softmax scores to `scores`
/// and the arg-max to `action` (either may be null).
///
/// # Safety
/// `features` must hold `n_frames * dim` values and `scores` (if non-null) `scores_len`.
#[no_mangle]
pub unsafe extern "C" fn tagg_model_predict(
    model: *const TaggModel,
    features: *const f64,
    n_frames: usize,
    dim: usize,
    fps: f64,
    t: usize,
    scores: *mut f64,
    scores_len: usize,
    action: *mut usize,
) -> TaggStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Fail(TaggStatus::InvalidArgument, "n_frames * dim overflows".into()))?;
        let feats = slice_arg(features, n, "features")?;
        let seq = FrameSequence::new(feats.to_vec(), dim, fps)?;
        let bank = SnippetBank::build(&seq, t, &m.state.config.snippets)?;
        let s = m.state.model.scores(&bank)?;
        if !scores.is_null() {
            if scores_len < s.len() {
                return Err(Fail(TaggStatus::BufferTooSmall, format!("need {} scores", s.len())));
            }
            ptr::copy_nonoverlapping(s.as_ptr(), scores, s.len());
        }
        if !action.is_null() {
            *action = tagg::tensor::argmax(&s);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tagg_sequence_read(path: *const c_char, out: *mut *mut TaggSequence) -> TaggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let seq = io::read_sequence(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TaggSequence { seq }));
        Ok(())
    })
}

/// # Safety
/// `seq` must come from `tagg_sequence_read` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tagg_sequence_free(seq: *mut TaggSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// # Safety
/// `seq` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn tagg_sequence_len(seq: *const TaggSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.seq.len())
}

/// # Safety
/// `seq` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn tagg_sequence_dim(seq: *const TaggSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.seq.dim())
}

/// Borrowed pointer to the `len x dim` features; valid while `seq` lives.
///
/// # Safety
/// `seq` must be a live handle or null (returns null).
#[no_mangle]
pub unsafe extern "C" fn tagg_sequence_features(seq: *const TaggSequence) -> *const f64 {
    seq.as_ref().map_or(ptr::null(), |s| s.seq.features().as_ptr())
}

/// Class with the highest mean softmax over `n_models` rows of `n_classes` logits.
///
/// # Safety
/// `logits` must hold `n_models * n_classes` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn tagg_ensemble_infer(
    logits: *const f64,
    n_models: usize,
    n_classes: usize,
    out: *mut usize,
) -> TaggStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_classes == 0 {
            return Err(Fail(TaggStatus::InvalidArgument, "n_classes must be >= 1".into()));
        }
        let n = n_models
            .checked_mul(n_classes)
            .ok_or_else(|| Fail(TaggStatus::InvalidArgument, "size overflows".into()))?;
        let all = slice_arg(logits, n, "logits")?;
        let rows: Vec<&[f64]> = all.chunks(n_classes).collect();
        *out = ensemble_infer(&rows)?;
        Ok(())
    })
}
