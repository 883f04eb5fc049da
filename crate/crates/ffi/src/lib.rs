//! C ABI for rarematch.
//!
//! Models, shard caches and sessions are opaque handles. Each is created by
//! an `rm_*_load` / `rm_*_open` call and released with the matching
//! `rm_*_free`. Every fallible call returns an [`RmStatus`]; after a failure,
//! [`rm_last_error`] returns a message for the calling thread. Strings are
//! NUL-terminated UTF-8. Panics never cross the boundary; they are reported
//! as `RM_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rarematch::backbone::{load_checkpoint, Batch, ModelState};
use rarematch::catalog::Label;
use rarematch::metrics::{auprc, auroc, efficiency_at, ScoreRow, ScoreTable};
use rarematch::scorer::{score_stream, ScoreOptions};
use rarematch::session::ActiveSession;
use rarematch::shard::ShardCache;
use rarematch::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Contract = 6,
    UnknownId = 7,
    Usage = 8,
    UndefinedMetric = 9,
    Busy = 10,
    Internal = 99,
}

/// Trained model: scores images with its EMA weights.
pub struct RmModel {
    state: ModelState,
}

/// Opened shard cache.
pub struct RmCache {
    cache: ShardCache,
}

/// Active-learning session loaded from a session directory.
pub struct RmSession {
    session: ActiveSession,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(RmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::NotFound(_) => RmStatus::Io,
            Error::Decode(_)
            | Error::Format(_)
            | Error::InvalidData(_)
            | Error::Parse { .. }
            | Error::MalformedHeader(_)
            | Error::Truncated { .. }
            | Error::UnsupportedShape(_)
            | Error::InvalidCache(_)
            | Error::Integrity(_)
            | Error::Json(_) => RmStatus::Format,
            Error::Config(_) | Error::Sampler(_) | Error::Split(_) => RmStatus::Config,
            Error::Contract(_) | Error::NonFinite(_) => RmStatus::Contract,
            Error::UnknownId(_) | Error::Join(_) => RmStatus::UnknownId,
            Error::Usage(_) => RmStatus::Usage,
            Error::UndefinedMetric(_) => RmStatus::UndefinedMetric,
            Error::Busy => RmStatus::Busy,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RmStatus::NullArgument, format!("{what} is null"))
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal error: {message}"));
            RmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_model_load(path: *const c_char, out: *mut *mut RmModel) -> RmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let state = load_checkpoint(&PathBuf::from(path))?.state;
        put(out, Box::into_raw(Box::new(RmModel { state })), "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`rm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_model_free(model: *mut RmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape the model expects.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_model_input_shape(
    model: *const RmModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> RmStatus {
    guard(|| {
        let spec = &ref_arg(model, "model")?.state.spec;
        put(channels, spec.channels, "channels")?;
        put(height, spec.height, "height")?;
        put(width, spec.width, "width")
    })
}

/// Anomaly scores for `n_images` images stored back to back in CHW layout
/// with values in [0, 1]. `scores` receives `n_images` values.
///
/// # Safety
/// `pixels` must hold `n_images * C * H * W` floats and `scores` room for
/// `n_images` floats.
#[no_mangle]
pub unsafe extern "C" fn rm_model_score(
    model: *const RmModel,
    pixels: *const f32,
    n_images: usize,
    scores: *mut f32,
) -> RmStatus {
    guard(|| {
        let state = &ref_arg(model, "model")?.state;
        if n_images == 0 {
            return Ok(());
        }
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        let spec = &state.spec;
        let data = std::slice::from_raw_parts(pixels, n_images * spec.input_len()).to_vec();
        let batch = Batch {
            n: n_images,
            c: spec.channels,
            h: spec.height,
            w: spec.width,
            data,
        };
        let out = state.score_batch(&batch)?;
        std::slice::from_raw_parts_mut(scores, n_images).copy_from_slice(&out);
        Ok(())
    })
}

/// Opens a shard cache directory; fails if any shard is invalid.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_cache_open(path: *const c_char, out: *mut *mut RmCache) -> RmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cache = ShardCache::open_strict(&PathBuf::from(path))?;
        put(out, Box::into_raw(Box::new(RmCache { cache })), "out")
    })
}

/// Releases a cache. Null is ignored.
///
/// # Safety
/// `cache` must come from [`rm_cache_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_cache_free(cache: *mut RmCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Number of images in the cache.
///
/// # Safety
/// `cache` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_cache_len(cache: *const RmCache, len: *mut usize) -> RmStatus {
    guard(|| put(len, ref_arg(cache, "cache")?.cache.len(), "len"))
}

/// Scores every image of `cache`, writing `id,score` rows in shard order to
/// `scores_csv` and the `top_k` best, ranked, to `topk_csv`. `scored`
/// (optional) receives the image count.
///
/// # Safety
/// Handles must be live; paths must be valid C strings.
#[no_mangle]
pub unsafe extern "C" fn rm_score_cache(
    model: *const RmModel,
    cache: *const RmCache,
    top_k: usize,
    workers: usize,
    scores_csv: *const c_char,
    topk_csv: *const c_char,
    scored: *mut usize,
) -> RmStatus {
    guard(|| {
        let state = &ref_arg(model, "model")?.state;
        let cache = &ref_arg(cache, "cache")?.cache;
        let scores_path = PathBuf::from(str_arg(scores_csv, "scores_csv")?);
        let topk_path = PathBuf::from(str_arg(topk_csv, "topk_csv")?);
        let opts = ScoreOptions {
            top_k,
            workers: workers.max(1),
            ..ScoreOptions::default()
        };
        let file = std::fs::File::create(&scores_path).map_err(Error::from)?;
        let mut w = std::io::BufWriter::new(file);
        let summary = score_stream(state, cache, &opts, &mut w, &mut |_| {})?;
        w.flush().map_err(Error::from)?;
        summary.top.write_csv(&topk_path)?;
        if !scored.is_null() {
            scored.write(summary.scored);
        }
        Ok(())
    })
}

/// Loads a session directory whose images live in its configured cache.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_session_load(dir: *const c_char, out: *mut *mut RmSession) -> RmStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let session = ActiveSession::load(&PathBuf::from(dir))?;
        put(out, Box::into_raw(Box::new(RmSession { session })), "out")
    })
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `session` must come from [`rm_session_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rm_session_free(session: *mut RmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of completed cycles.
///
/// # Safety
/// `session` must be a live handle; `cycle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_session_cycle(session: *const RmSession, cycle: *mut u32) -> RmStatus {
    guard(|| put(cycle, ref_arg(session, "session")?.session.cycle, "cycle"))
}

/// Runs one training cycle and re-ranks the pool. `auroc` (optional)
/// receives the evaluation AUROC, or NaN when it is undefined.
///
/// # Safety
/// `session` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn rm_session_run_cycle(session: *mut RmSession, auroc: *mut f64) -> RmStatus {
    guard(|| {
        let s = &mut mut_arg(session, "session")?.session;
        let (_, report) = s.run_cycle(None)?;
        if !auroc.is_null() {
            auroc.write(report.metrics.map_or(f64::NAN, |m| m.auroc));
        }
        Ok(())
    })
}

/// Commits one label: 0 normal, 1 anomaly.
///
/// # Safety
/// `session` must be a live handle; `id` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn rm_session_add_label(session: *mut RmSession, id: *const c_char, label: u8) -> RmStatus {
    guard(|| {
        let s = &mut mut_arg(session, "session")?.session;
        let id = str_arg(id, "id")?;
        let label = Label::try_from(label).map_err(Failure::from)?;
        s.commit_labels(&[(id.to_string(), label)])?;
        Ok(())
    })
}

/// Writes the session to `dir`.
///
/// # Safety
/// `session` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn rm_session_save(session: *const RmSession, dir: *const c_char) -> RmStatus {
    guard(|| {
        let s = &ref_arg(session, "session")?.session;
        s.save(&PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

unsafe fn table(scores: *const f64, labels: *const u8, n: usize) -> Result<ScoreTable, Failure> {
    if n > 0 && (scores.is_null() || labels.is_null()) {
        return Err(null("scores or labels"));
    }
    let (scores, labels) = if n == 0 {
        (&[][..], &[][..])
    } else {
        (std::slice::from_raw_parts(scores, n), std::slice::from_raw_parts(labels, n))
    };
    let rows = scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| Ok(ScoreRow::new(format!("{i:012}"), s, Some(Label::try_from(l)?))))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(ScoreTable::new(rows)?)
}

/// Rank-based AUROC of `n` scores against labels (0 normal, 1 anomaly).
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RmStatus {
    guard(|| put(out, auroc(&table(scores, labels, n)?)?, "out"))
}

/// Average precision of `n` scores against labels.
///
/// # Safety
/// As [`rm_auroc`].
#[no_mangle]
pub unsafe extern "C" fn rm_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> RmStatus {
    guard(|| put(out, auprc(&table(scores, labels, n)?)?, "out"))
}

/// Percentage of anomalies within the top `percent` of scores. Equal scores
/// are ordered by position.
///
/// # Safety
/// As [`rm_auroc`].
#[no_mangle]
pub unsafe extern "C" fn rm_efficiency_at(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    percent: f64,
    out: *mut f64,
) -> RmStatus {
    guard(|| put(out, efficiency_at(&table(scores, labels, n)?, percent)?, "out"))
}
