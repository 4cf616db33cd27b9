//! C interface to wavetrunk models.
//!
//! Every fallible function returns a [`WtStatus`]; on failure the message
//! is kept per thread and read with [`wt_last_error_message`]. Models are
//! opaque [`WtModel`] handles owned by the caller and released with
//! [`wt_model_free`]. Audio is mono `float` at 16 kHz, already
//! preprocessed the way the model was trained.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavetrunk::config::RunConfig;
use wavetrunk::ndgrad::Array;
use wavetrunk::train::{Checkpoint, Model, ModelConfig, TaskSpec};
use wavetrunk::trunk::TrunkConfig;
use wavetrunk::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WtStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed audio or manifest data.
    Format = 4,
    /// Corrupt, truncated or incompatible checkpoint.
    Checkpoint = 5,
    /// The output buffer is smaller than the value written to `written`.
    BufferTooSmall = 6,
    /// Internal error; the handle involved must not be used again.
    Panic = 7,
}

/// Trunk plus task heads.
pub struct WtModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WtStatus {
    match e {
        Error::Io { .. } => WtStatus::Io,
        Error::Format { .. } | Error::Data(_) => WtStatus::Format,
        Error::Checkpoint(_) => WtStatus::Checkpoint,
        _ => WtStatus::InvalidArgument,
    }
}

struct Failure(WtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(WtStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(WtStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const WtModel) -> Result<&'a Model<f32>, Failure> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn samples_arg(p: *const f32, len: usize) -> Result<Array<f32>, Failure> {
    if p.is_null() {
        return Err(null("samples"));
    }
    if len == 0 {
        return Err(Failure(WtStatus::InvalidArgument, "no samples".into()));
    }
    let x = std::slice::from_raw_parts(p, len).to_vec();
    Ok(Array::new(vec![1, 1, len], x)?)
}

/// Copies `values` to `out` if it holds them; always reports the count.
unsafe fn write_out(values: &[f32], out: *mut f32, out_len: usize, written: *mut usize) -> Result<(), Failure> {
    if written.is_null() {
        return Err(null("written"));
    }
    *written = values.len();
    if out_len < values.len() {
        return Err(Failure(
            WtStatus::BufferTooSmall,
            format!("output needs {} floats, buffer holds {out_len}", values.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn hand_out(model: Model<f32>, out: *mut *mut WtModel) {
    *out = Box::into_raw(Box::new(WtModel { model }));
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `1 + blocks * (2^layers - 1)`, or 0 when `blocks` is 0 or `layers` is
/// outside 1..=24.
#[no_mangle]
pub extern "C" fn wt_receptive_field(blocks: usize, layers: usize) -> usize {
    let cfg = TrunkConfig::new(blocks, layers, 1);
    match cfg.validate() {
        Ok(()) => cfg.receptive_field(),
        Err(_) => 0,
    }
}

/// Freshly initialised model from a JSON run configuration (the same
/// document the command-line tool reads). Only `trunk` and `tasks` are
/// used; `tasks` may be empty for an embedding-only model.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wt_model_new(config_json: *const c_char, seed: u64, out: *mut *mut WtModel) -> WtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_json(str_arg(config_json, "config_json")?)?;
        if !cfg.tasks.is_empty() {
            cfg.validate()?;
        }
        let heads = cfg.task_specs().iter().map(TaskSpec::named_head).collect();
        let model = Model::new(ModelConfig { trunk: cfg.trunk(), heads }, &mut ChaCha8Rng::seed_from_u64(seed))?;
        hand_out(model, out);
        Ok(())
    })
}

/// Model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wt_model_load(path: *const c_char, out: *mut *mut WtModel) -> WtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Checkpoint::load(str_arg(path, "path")?)?.to_model::<f32>()?;
        hand_out(model, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wt_model_free(model: *mut WtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trunk channels.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wt_model_channels(model: *const WtModel, out: *mut usize) -> WtStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.trunk_config().channels;
        Ok(())
    })
}

/// Trunk embedding of `len` samples, channel-major `[channels][len]`.
/// `*written` receives the number of floats required even when the
/// buffer is too small.
///
/// # Safety
/// `samples` must hold `len` floats, `out` `out_len` floats, and
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wt_model_embed(
    model: *const WtModel,
    samples: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> WtStatus {
    guard(|| {
        let m = model_arg(model)?;
        let emb = m.embed(&samples_arg(samples, len)?)?;
        write_out(emb.data(), out, out_len, written)
    })
}

/// Eval-mode output of task `task`: one score per class for
/// classification heads, one value per sample for the others.
///
/// # Safety
/// As for [`wt_model_embed`]; `task` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wt_model_predict(
    model: *const WtModel,
    task: *const c_char,
    samples: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> WtStatus {
    guard(|| {
        let m = model_arg(model)?;
        let name = str_arg(task, "task")?;
        let y = m.predict(name, &samples_arg(samples, len)?)?;
        write_out(y.data(), out, out_len, written)
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// plus one, or 0 if the last call succeeded. `buf` may be null to query
/// the length.
///
/// # Safety
/// `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn wt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}
