//! C ABI over the synthesis engine.
//!
//! Every function returns a [`MotabStatus`]; on failure the message is
//! available from [`motab_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings returned
//! through out-parameters are owned by the caller and released with
//! [`motab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use motab::dataio::SftRecord;
use motab::pipeline::{self, BatchOptions};
use motab::policy::{fixtures, PolicyBackend, RemoteEndpoint, RemotePolicy, TabularPolicy};
use motab::{backtrack, monitor, Method, Question, RunConfig, TokenScore};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Backend = 5,
    Io = 6,
    /// Trajectories failed; the dataset was still written.
    Partial = 7,
    Panic = 8,
}

/// Run configuration handle.
pub struct MotabConfig {
    inner: RunConfig,
}

/// Policy backend handle (tabular or remote).
pub struct MotabPolicy {
    inner: Arc<dyn PolicyBackend>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

type FfiResult<T> = Result<T, (MotabStatus, String)>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MotabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MotabStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MotabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((MotabStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (MotabStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err((MotabStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(out: *mut T, v: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err((MotabStatus::NullPointer, format!("{name} is null")));
    }
    out.write(v);
    Ok(())
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\u0000")).expect("no interior nul").into_raw()
}

fn invalid(e: impl std::fmt::Display) -> (MotabStatus, String) {
    (MotabStatus::InvalidArgument, e.to_string())
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn motab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn motab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn motab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a configuration with default values.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_config_new(out: *mut *mut MotabConfig) -> MotabStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(MotabConfig { inner: RunConfig::default() })), "out"))
}

/// Sets one configuration key from its textual value and revalidates.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn motab_config_set(cfg: *mut MotabConfig, key: *const c_char, value: *const c_char) -> MotabStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or((MotabStatus::NullPointer, "cfg is null".into()))?;
        let (k, v) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.inner.clone();
        next.set(k, v).map_err(|e| (MotabStatus::Config, e.0))?;
        next.validate().map_err(|e| (MotabStatus::Config, e.0))?;
        cfg.inner = next;
        Ok(())
    })
}

/// Effective configuration as JSON.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_config_to_json(cfg: *const MotabConfig, out: *mut *mut c_char) -> MotabStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or((MotabStatus::NullPointer, "cfg is null".into()))?;
        let json = serde_json::to_string(&cfg.inner).map_err(invalid)?;
        write_out(out, to_c_string(json), "out")
    })
}

/// # Safety
/// `cfg` must come from [`motab_config_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn motab_config_free(cfg: *mut MotabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn policy_out(out: *mut *mut MotabPolicy, inner: Arc<dyn PolicyBackend>) -> FfiResult<()> {
    unsafe { write_out(out, Box::into_raw(Box::new(MotabPolicy { inner })), "out") }
}

/// Bundled tabular fixture by name.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_policy_fixture(name: *const c_char, out: *mut *mut MotabPolicy) -> MotabStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let p = fixtures::by_name(name).ok_or_else(|| invalid(format!("unknown fixture `{name}`")))?;
        policy_out(out, Arc::new(p))
    })
}

/// Tabular policy from its JSON specification.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_policy_tabular_json(json: *const c_char, out: *mut *mut MotabPolicy) -> MotabStatus {
    guard(|| {
        let p = TabularPolicy::from_json(str_arg(json, "json")?).map_err(invalid)?;
        policy_out(out, Arc::new(p))
    })
}

/// OpenAI-compatible completions endpoint. The bearer token, if any, is read
/// from the environment variable named by `auth_env` (may be null).
///
/// # Safety
/// String arguments must be NUL-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_policy_remote(
    base_url: *const c_char,
    model: *const c_char,
    auth_env: *const c_char,
    out: *mut *mut MotabPolicy,
) -> MotabStatus {
    guard(|| {
        let mut ep = RemoteEndpoint::new(str_arg(base_url, "base_url")?, str_arg(model, "model")?);
        if let Some(var) = opt_str_arg(auth_env, "auth_env")? {
            let token = std::env::var(var).map_err(|_| (MotabStatus::Config, format!("environment variable {var} is not set")))?;
            ep.auth_token = Some(token);
        }
        let p = RemotePolicy::new(ep).map_err(|e| (MotabStatus::Backend, e.to_string()))?;
        policy_out(out, Arc::new(p))
    })
}

/// # Safety
/// `p` must come from a `motab_policy_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn motab_policy_free(p: *mut MotabPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn parse_method(m: &str) -> FfiResult<Method> {
    m.parse::<Method>().map_err(invalid)
}

/// Synthesizes one trajectory and returns it as a dataset record (one JSON
/// line). Backend failures are reported inside the record (`terminal =
/// failed`), not through the status.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_synthesize(
    student: *const MotabPolicy,
    teacher: *const MotabPolicy,
    cfg: *const MotabConfig,
    method: *const c_char,
    question_id: *const c_char,
    question_text: *const c_char,
    sample_index: u64,
    out_json: *mut *mut c_char,
) -> MotabStatus {
    guard(|| {
        let s = student.as_ref().ok_or((MotabStatus::NullPointer, "student is null".into()))?;
        let t = teacher.as_ref().ok_or((MotabStatus::NullPointer, "teacher is null".into()))?;
        let cfg = &cfg.as_ref().ok_or((MotabStatus::NullPointer, "cfg is null".into()))?.inner;
        let method = parse_method(str_arg(method, "method")?)?;
        let q = Question::new(str_arg(question_id, "question_id")?, str_arg(question_text, "question_text")?);
        let traj = pipeline::synthesize(method, s.inner.as_ref(), t.inner.as_ref(), &q, sample_index, cfg);
        let line = SftRecord::from_trajectory(&traj, &cfg.fingerprint()).to_line().map_err(invalid)?;
        write_out(out_json, to_c_string(line), "out_json")
    })
}

/// Batch synthesis from a JSONL question file into a JSONL dataset with a
/// checkpoint next to it. Writes the run summary JSON to `out_summary`
/// (may be null). Returns `Partial` when some trajectories failed.
///
/// # Safety
/// Handles must be live; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn motab_run_batch(
    student: *const MotabPolicy,
    teacher: *const MotabPolicy,
    cfg: *const MotabConfig,
    method: *const c_char,
    questions_path: *const c_char,
    output_path: *const c_char,
    out_summary: *mut *mut c_char,
) -> MotabStatus {
    let mut partial = false;
    let status = guard(|| {
        let s = student.as_ref().ok_or((MotabStatus::NullPointer, "student is null".into()))?;
        let t = teacher.as_ref().ok_or((MotabStatus::NullPointer, "teacher is null".into()))?;
        let cfg = &cfg.as_ref().ok_or((MotabStatus::NullPointer, "cfg is null".into()))?.inner;
        let method = parse_method(str_arg(method, "method")?)?;
        let questions = motab::dataio::read_questions(Path::new(str_arg(questions_path, "questions_path")?))
            .map_err(|e| (MotabStatus::Io, e.to_string()))?;
        let opts = BatchOptions::new(method, str_arg(output_path, "output_path")?);
        let summary = pipeline::run_batch(s.inner.as_ref(), t.inner.as_ref(), &questions, cfg, &opts).map_err(|e| match e {
            pipeline::BatchError::Config(c) => (MotabStatus::Config, c.0),
            pipeline::BatchError::Data(d) => (MotabStatus::Io, d.to_string()),
        })?;
        partial = summary.failed > 0;
        if !out_summary.is_null() {
            out_summary.write(to_c_string(serde_json::to_string(&summary).map_err(invalid)?));
        }
        Ok(())
    });
    if status == MotabStatus::Ok && partial {
        set_error("some trajectories failed; see the failures file");
        return MotabStatus::Partial;
    }
    status
}

/// Step value `exp(mean(logprobs))`.
///
/// # Safety
/// `logprobs` must point to `n` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_step_value(logprobs: *const f64, n: usize, out: *mut f64) -> MotabStatus {
    guard(|| {
        let scores: Vec<TokenScore> = slice_arg(logprobs, n, "logprobs")?.iter().map(|&l| TokenScore::new("", l)).collect();
        write_out(out, monitor::step_value(&scores).map_err(invalid)?, "out")
    })
}

/// Entropy of the renormalized top-k distribution given its logprobs.
///
/// # Safety
/// `logprobs` must point to `n` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_renormalized_entropy(logprobs: *const f64, n: usize, out: *mut f64) -> MotabStatus {
    guard(|| {
        let top: Vec<(String, f64)> = slice_arg(logprobs, n, "logprobs")?.iter().enumerate().map(|(i, &l)| (i.to_string(), l)).collect();
        write_out(out, monitor::renormalized_entropy(&top).map_err(invalid)?, "out")
    })
}

/// `gamma0 * exp(-alpha * entropy)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_adaptive_threshold(gamma0: f64, alpha: f64, entropy: f64, out: *mut f64) -> MotabStatus {
    guard(|| write_out(out, monitor::adaptive_threshold(gamma0, alpha, entropy).map_err(invalid)?, "out"))
}

/// Rewind point (1-based) for a breach at step `breach` (1-based).
///
/// # Safety
/// `values` and `thresholds` must point to `n` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn motab_select_safe_point(
    values: *const f64,
    thresholds: *const f64,
    n: usize,
    breach: usize,
    out: *mut usize,
) -> MotabStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        let g = slice_arg(thresholds, n, "thresholds")?;
        write_out(out, backtrack::select_safe_point(v, g, breach).map_err(invalid)?, "out")
    })
}
