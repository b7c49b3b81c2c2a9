//! C ABI over `last-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released by the matching `*_free`. Every fallible
//! function returns a [`LastStatus`]; on failure the message is kept per
//! thread and read with [`last_error_message`]. Strings handed out by the
//! library are owned by the caller and released with [`last_string_free`].
//! Configuration arguments are JSON run-configuration documents; NULL or an
//! empty string means all defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use last_core::backbone::{Backbone, ViTWeights};
use last_core::cache::{self, FeatureCache};
use last_core::config::RunConfig;
use last_core::data::{self, Dataset};
use last_core::error::Error;
use last_core::memory::{self, Strategy};
use last_core::side::SideNetwork;
use last_core::train::{self, RunSpec};

/// Result of every fallible call. Non-zero values other than the argument
/// and panic codes match the `last` CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastStatus {
    Ok = 0,
    /// A required pointer was NULL or a string was not UTF-8.
    InvalidArgument = 1,
    Config = 2,
    Io = 3,
    Numeric = 4,
    /// The library panicked; the handle arguments should be treated as lost.
    Panic = 5,
}

/// Frozen backbone weights plus their encode counter.
pub struct LastBackbone(Backbone);

pub struct LastDataset(Dataset);

/// Read-only view of an extracted tap cache.
pub struct LastCache(FeatureCache);

pub struct LastSideNetwork(SideNetwork);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LastStatus {
    match e.exit_code() {
        3 => LastStatus::Io,
        4 => LastStatus::Numeric,
        _ => LastStatus::Config,
    }
}

struct Fail(LastStatus);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = status_of(&e);
        set_error(e.to_string());
        Fail(status)
    }
}

fn invalid(msg: &str) -> Fail {
    set_error(msg.to_string());
    Fail(LastStatus::InvalidArgument)
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LastStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LastStatus::Ok,
        Ok(Err(Fail(status))) => status,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LastStatus::Panic
        }
    }
}

/// # Safety
/// `s` is NULL or a NUL-terminated string valid for the call.
unsafe fn opt_str<'a>(s: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Some)
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

/// # Safety
/// As [`opt_str`].
unsafe fn req_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    opt_str(s, what)?.ok_or_else(|| invalid(&format!("{what} is NULL")))
}

/// # Safety
/// As [`opt_str`].
unsafe fn path(s: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    req_str(s, what).map(PathBuf::from)
}

/// # Safety
/// As [`opt_str`].
unsafe fn config(json: *const c_char) -> Result<RunConfig, Fail> {
    match opt_str(json, "config")? {
        None => Ok(RunConfig::default()),
        Some(t) if t.trim().is_empty() => Ok(RunConfig::default()),
        Some(t) => Ok(RunConfig::from_json(t)?),
    }
}

/// # Safety
/// `h` is NULL or a live handle from this library.
unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| invalid(&format!("{what} handle is NULL")))
}

/// # Safety
/// `out` is NULL or valid for one write.
unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is NULL"));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn last_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is NULL or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn last_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- backbone ---------------------------------------------------------------

/// Synthetic backbone for the configuration's `backbone` section.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut LastBackbone,
) -> LastStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let w = ViTWeights::init_synthetic(&cfg.backbone, seed)?;
        put(out, Box::into_raw(Box::new(LastBackbone(Backbone::new(w)))))
    })
}

/// # Safety
/// `path_` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_load(path_: *const c_char, out: *mut *mut LastBackbone) -> LastStatus {
    guard(|| {
        let w = ViTWeights::load(&path(path_, "path")?)?;
        put(out, Box::into_raw(Box::new(LastBackbone(Backbone::new(w)))))
    })
}

/// # Safety
/// `h` is a live backbone handle; `path_` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_save(h: *const LastBackbone, path_: *const c_char) -> LastStatus {
    guard(|| Ok(handle(h, "backbone")?.0.weights().save(&path(path_, "path")?)?))
}

/// SHA-256 of the weights as lowercase hex; free with [`last_string_free`].
///
/// # Safety
/// `h` is a live backbone handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_checksum(h: *const LastBackbone, out: *mut *mut c_char) -> LastStatus {
    guard(|| {
        let b = handle(h, "backbone")?;
        put(out, into_c_string(b.0.checksum().to_string()))
    })
}

/// Images encoded by this backbone so far.
///
/// # Safety
/// `h` is a live backbone handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_forward_count(h: *const LastBackbone, out: *mut usize) -> LastStatus {
    guard(|| put(out, handle(h, "backbone")?.0.forward_count()))
}

/// # Safety
/// `h` is NULL or a backbone handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn last_backbone_free(h: *mut LastBackbone) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

// ---- dataset ----------------------------------------------------------------

/// The `synth-cls` task described by the configuration's `data` section.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_dataset_generate(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut LastDataset,
) -> LastStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let d = data::synth_cls(&cfg.data, &cfg.backbone, seed)?;
        put(out, Box::into_raw(Box::new(LastDataset(d))))
    })
}

/// # Safety
/// `dir` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_dataset_load(dir: *const c_char, out: *mut *mut LastDataset) -> LastStatus {
    guard(|| {
        let d = Dataset::load(&path(dir, "dir")?)?;
        put(out, Box::into_raw(Box::new(LastDataset(d))))
    })
}

/// # Safety
/// `h` is a live dataset handle; `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn last_dataset_save(h: *const LastDataset, dir: *const c_char) -> LastStatus {
    guard(|| Ok(handle(h, "dataset")?.0.save(&path(dir, "dir")?)?))
}

/// # Safety
/// `h` is a live dataset handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_dataset_len(h: *const LastDataset, out: *mut usize) -> LastStatus {
    guard(|| put(out, handle(h, "dataset")?.0.len()))
}

/// # Safety
/// `h` is NULL or a dataset handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn last_dataset_free(h: *mut LastDataset) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

// ---- cache ------------------------------------------------------------------

/// Extracts taps at `gap` into `dir`. `up_to_date` (may be NULL) receives 1
/// when an identical cache was already present and nothing was recomputed.
///
/// # Safety
/// `dataset` and `backbone` are live handles; `dir` is a NUL-terminated
/// string; `up_to_date` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn last_cache_extract(
    dataset: *const LastDataset,
    backbone: *const LastBackbone,
    gap: usize,
    dir: *const c_char,
    up_to_date: *mut i32,
) -> LastStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let b = handle(backbone, "backbone")?;
        let outcome = cache::extract(&d.0, &b.0, gap, &path(dir, "dir")?)?;
        if !up_to_date.is_null() {
            up_to_date.write(i32::from(outcome.status == cache::ExtractStatus::UpToDate));
        }
        Ok(())
    })
}

/// # Safety
/// `dir` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_cache_open(dir: *const c_char, out: *mut *mut LastCache) -> LastStatus {
    guard(|| {
        let c = FeatureCache::open(&path(dir, "dir")?)?;
        put(out, Box::into_raw(Box::new(LastCache(c))))
    })
}

/// Samples in the cache.
///
/// # Safety
/// `h` is a live cache handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_cache_len(h: *const LastCache, out: *mut usize) -> LastStatus {
    guard(|| put(out, handle(h, "cache")?.0.manifest().samples))
}

/// # Safety
/// `h` is NULL or a cache handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn last_cache_free(h: *mut LastCache) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

// ---- side network -----------------------------------------------------------

/// Side network for the configuration's `side` and `backbone` sections.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_side_init(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut LastSideNetwork,
) -> LastStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let n = SideNetwork::init(&cfg.side, &cfg.backbone, seed)?;
        put(out, Box::into_raw(Box::new(LastSideNetwork(n))))
    })
}

/// # Safety
/// `path_` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_side_load(path_: *const c_char, out: *mut *mut LastSideNetwork) -> LastStatus {
    guard(|| {
        let n = SideNetwork::load(&path(path_, "path")?)?;
        put(out, Box::into_raw(Box::new(LastSideNetwork(n))))
    })
}

/// # Safety
/// `h` is a live side-network handle; `path_` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn last_side_save(h: *const LastSideNetwork, path_: *const c_char) -> LastStatus {
    guard(|| Ok(handle(h, "side network")?.0.save(&path(path_, "path")?)?))
}

/// Trainable parameters, with or without the classification head.
///
/// # Safety
/// `h` is a live side-network handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_side_param_count(
    h: *const LastSideNetwork,
    include_head: bool,
    out: *mut usize,
) -> LastStatus {
    guard(|| put(out, handle(h, "side network")?.0.count_trainable_params(include_head)))
}

/// # Safety
/// `h` is NULL or a side-network handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn last_side_free(h: *mut LastSideNetwork) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

// ---- training and memory ----------------------------------------------------

/// Trains the configured side network on `cache`. When `out_dir` is not
/// NULL the weights and metric log are written there as `<run_id>.lasts`
/// and `<run_id>.jsonl`. `out_side` (may be NULL) receives the trained
/// network; `out_log` (may be NULL) the JSON-lines metric log.
///
/// # Safety
/// `cache_` is a live cache handle; string arguments are NULL or
/// NUL-terminated; output pointers are NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn last_train(
    cache_: *const LastCache,
    config_json: *const c_char,
    run_id: *const c_char,
    out_dir: *const c_char,
    out_side: *mut *mut LastSideNetwork,
    out_log: *mut *mut c_char,
) -> LastStatus {
    guard(|| {
        let c = handle(cache_, "cache")?;
        let cfg = config(config_json)?;
        let spec = RunSpec {
            id: opt_str(run_id, "run_id")?.unwrap_or("train").to_string(),
            side: cfg.side,
            train: cfg.train,
            seed: cfg.seed,
        };
        let result = train::train(&spec, &c.0)?;
        if let Some(dir) = opt_str(out_dir, "out_dir")? {
            result.persist(&PathBuf::from(dir))?;
        }
        if !out_log.is_null() {
            out_log.write(into_c_string(result.log_jsonl()));
        }
        if !out_side.is_null() {
            out_side.write(Box::into_raw(Box::new(LastSideNetwork(result.side))));
        }
        Ok(())
    })
}

/// Footprint report for one strategy (`full`, `bias_only`,
/// `entangled_lowrank`, `ladder_side`, `last`, `linear_probe`) on the
/// configuration's backbone, as JSON; free with [`last_string_free`].
///
/// # Safety
/// `config_json` is NULL or NUL-terminated; `strategy` is NUL-terminated;
/// `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn last_estimate_memory(
    config_json: *const c_char,
    strategy: *const c_char,
    out_json: *mut *mut c_char,
) -> LastStatus {
    guard(|| {
        let cfg = config(config_json)?;
        let s: Strategy = req_str(strategy, "strategy")?.parse()?;
        let report = memory::estimate(&cfg.backbone, &cfg.side, s, &cfg.memory)?;
        let text = serde_json::to_string(&report).expect("reports serialise");
        put(out_json, into_c_string(text))
    })
}
