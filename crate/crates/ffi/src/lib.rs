//! C ABI over `sinkprune`.
//!
//! Models and score tables cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns an [`SpStatus`]; on failure `sp_last_error_message` describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sinkprune::eval::perplexity;
use sinkprune::io::{load_checkpoint, save_checkpoint};
use sinkprune::metrics::{scan_model, Metric, ScoreTable};
use sinkprune::model::fixture::{build_synthetic_model, random_checkpoint, SinkRecipe};
use sinkprune::model::Checkpoint;
use sinkprune::pruning::{apply, rank_targets, Strategy};
use sinkprune::Error;

/// Result codes. `SP_OK` is zero; everything else is a failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    SpOk = 0,
    SpNullPointer = 1,
    SpInvalidUtf8 = 2,
    SpDimension = 3,
    SpConfig = 4,
    SpInput = 5,
    SpIndex = 6,
    SpPolicy = 7,
    SpUndefinedScore = 8,
    SpDegenerateFit = 9,
    SpMalformedManifest = 10,
    SpIncompleteCheckpoint = 11,
    SpCorruptWeights = 12,
    SpIo = 13,
    SpParse = 14,
    SpPanic = 15,
}

/// Opaque model handle.
pub struct SpModel {
    inner: Checkpoint,
}

/// Opaque score-table handle.
pub struct SpScoreTable {
    inner: ScoreTable,
}

/// Model dimensions.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

/// Fixture presets for `sp_model_build_fixture`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpPreset {
    SpPresetPlanted = 0,
    SpPresetUniform = 1,
    SpPresetRandom = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SpStatus {
    match e {
        Error::Dimension(_) => SpStatus::SpDimension,
        Error::Config(_) => SpStatus::SpConfig,
        Error::Input(_) => SpStatus::SpInput,
        Error::Index(_) => SpStatus::SpIndex,
        Error::Policy(_) => SpStatus::SpPolicy,
        Error::UndefinedScore(_) => SpStatus::SpUndefinedScore,
        Error::DegenerateFit(_) => SpStatus::SpDegenerateFit,
        Error::MalformedManifest(_) => SpStatus::SpMalformedManifest,
        Error::IncompleteCheckpoint(_) => SpStatus::SpIncompleteCheckpoint,
        Error::CorruptWeights(_) => SpStatus::SpCorruptWeights,
        Error::Io { .. } => SpStatus::SpIo,
        Error::Parse { .. } => SpStatus::SpParse,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::SpOk,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SpStatus::SpNullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            SpStatus::SpInvalidUtf8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SpStatus::SpPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `path` (a checkpoint stem, or either file of the pair).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(path: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = str_arg(path, "path")?;
        *out = boxed(SpModel { inner: load_checkpoint(Path::new(p))? });
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sp_model_save(model: *const SpModel, path: *const c_char) -> SpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let p = str_arg(path, "path")?;
        save_checkpoint(&m.inner, Path::new(p))?;
        Ok(())
    })
}

/// Builds a synthetic model. Planted presets carry two sink heads, one
/// routing head and one diagonal head.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_model_build_fixture(preset: SpPreset, seed: u64, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = match preset {
            SpPreset::SpPresetPlanted => build_synthetic_model(&SinkRecipe::planted(seed))?,
            SpPreset::SpPresetUniform => build_synthetic_model(&SinkRecipe::uniform(seed))?,
            SpPreset::SpPresetRandom => random_checkpoint(SinkRecipe::default_config(), seed)?,
        };
        *out = boxed(SpModel { inner });
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_config(model: *const SpModel, out: *mut SpModelConfig) -> SpStatus {
    guard(|| {
        let c = ref_arg(model, "model")?.inner.config;
        *out_arg(out, "out")? = SpModelConfig {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            d_head: c.d_head,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            rope_theta: c.rope_theta,
            norm_eps: c.norm_eps,
        };
        Ok(())
    })
}

/// Scores the model over `n_prompts` prompts of `seq_len` tokens stored
/// back to back in `tokens`. `metric` is one of `bos_head`, `bos_layer`,
/// `bi`, `mag`, `wanda`.
///
/// # Safety
/// `tokens` must hold `n_prompts * seq_len` values; `metric` must be
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_scan(
    model: *const SpModel,
    tokens: *const u32,
    n_prompts: usize,
    seq_len: usize,
    metric: *const c_char,
    out: *mut *mut SpScoreTable,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = ref_arg(model, "model")?;
        let metric: Metric = str_arg(metric, "metric")?.parse()?;
        let n = n_prompts.checked_mul(seq_len).ok_or_else(|| Error::Input("prompt block too large".into()))?;
        let flat: &[u32] = if n == 0 { &[] } else { std::slice::from_raw_parts(ref_arg(tokens, "tokens")?, n) };
        let prompts: Vec<Vec<u32>> =
            if seq_len == 0 { Vec::new() } else { flat.chunks(seq_len).map(<[u32]>::to_vec).collect() };
        *out = boxed(SpScoreTable { inner: scan_model(&m.inner, &prompts, metric)? });
        Ok(())
    })
}

/// Number of entries in a score table; 0 for a null handle.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_score_table_len(table: *const SpScoreTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.entries.len())
}

/// Reads entry `index`. `head` is set to -1 for layer-level tables.
///
/// # Safety
/// `table` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_score_table_get(
    table: *const SpScoreTable,
    index: usize,
    layer: *mut usize,
    head: *mut i64,
    score: *mut f64,
) -> SpStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.inner;
        let e = t
            .entries
            .get(index)
            .ok_or_else(|| Error::Index(format!("entry {index} of a {}-entry table", t.entries.len())))?;
        *out_arg(layer, "layer")? = e.layer;
        *out_arg(head, "head")? = e.head.map_or(-1, |h| h as i64);
        *out_arg(score, "score")? = e.score;
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sp_score_table_free(table: *mut SpScoreTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Ranks with `strategy` and returns a new pruned model; the input is left
/// untouched. `table` may be null for `bottom_up` and `top_down`.
///
/// # Safety
/// Handles must be live; `strategy` NUL-terminated; `out` writable;
/// `units_removed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn sp_prune(
    model: *const SpModel,
    table: *const SpScoreTable,
    strategy: *const c_char,
    ratio: f64,
    out: *mut *mut SpModel,
    units_removed: *mut usize,
) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = &ref_arg(model, "model")?.inner;
        let strategy: Strategy = str_arg(strategy, "strategy")?.parse()?;
        let shape;
        let scores = match (table.as_ref(), strategy.metric()) {
            (Some(t), _) => &t.inner,
            (None, None) => {
                shape = ScoreTable::shape_only(Metric::BosLayer, m.config.n_layers, m.config.n_heads);
                &shape
            }
            (None, Some(_)) => return Err(Fail::Null("table")),
        };
        let spec = rank_targets(scores, strategy, ratio)?;
        let pruned = apply(m, &spec)?;
        if let Some(u) = units_removed.as_mut() {
            *u = spec.targets.len();
        }
        *out = boxed(SpModel { inner: pruned });
        Ok(())
    })
}

/// Perplexity over non-overlapping windows of `seq_len` tokens.
///
/// # Safety
/// `tokens` must hold `n_tokens` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_perplexity(
    model: *const SpModel,
    tokens: *const u32,
    n_tokens: usize,
    seq_len: usize,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let stream: &[u32] =
            if n_tokens == 0 { &[] } else { std::slice::from_raw_parts(ref_arg(tokens, "tokens")?, n_tokens) };
        *out = perplexity(&m.inner, stream, seq_len)?;
        Ok(())
    })
}
