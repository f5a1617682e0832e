//! C ABI for bubblescope.
//!
//! Every fallible call returns a `BsStatus`; `BS_OK` is zero and errors are
//! negative. The message of the most recent error on the calling thread is
//! available through [`bs_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bubblescope::error::Error;
use bubblescope::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage, Workspace};
use bubblescope::synth::{generate_market, SynthConfig, SynthMarket};
use bubblescope::washtrade::{benford_test, powerlaw_exponent};

pub type BsStatus = i32;

pub const BS_OK: BsStatus = 0;
pub const BS_ERR_NULL: BsStatus = -1;
pub const BS_ERR_UTF8: BsStatus = -2;
pub const BS_ERR_CONFIG: BsStatus = -3;
pub const BS_ERR_IO: BsStatus = -4;
pub const BS_ERR_INVALID: BsStatus = -5;
pub const BS_ERR_MISSING_STAGE: BsStatus = -6;
pub const BS_ERR_INFEASIBLE: BsStatus = -7;
pub const BS_ERR_NUMERIC: BsStatus = -8;
pub const BS_ERR_STAGE: BsStatus = -9;
pub const BS_ERR_PANIC: BsStatus = -99;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code(e: &Error) -> BsStatus {
    match e {
        Error::Io { .. } | Error::Stream(_) => BS_ERR_IO,
        Error::Config(_) => BS_ERR_CONFIG,
        Error::MissingStage { .. } => BS_ERR_MISSING_STAGE,
        Error::Infeasible(_) => BS_ERR_INFEASIBLE,
        Error::RankDeficient { .. } | Error::Separation(_) => BS_ERR_NUMERIC,
        Error::Stage { .. } => BS_ERR_STAGE,
        _ => BS_ERR_INVALID,
    }
}

fn guard(f: impl FnOnce() -> Result<(), BsStatus>) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BS_OK,
        Ok(Err(c)) => c,
        Err(_) => {
            set_error("panic inside bubblescope".into());
            BS_ERR_PANIC
        }
    }
}

fn fail(e: Error) -> BsStatus {
    let c = code(&e);
    set_error(e.to_string());
    c
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, BsStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| {
        set_error("string argument is not valid UTF-8".into());
        BS_ERR_UTF8
    })
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, BsStatus> {
    opt_str(p)?.ok_or_else(|| {
        set_error(format!("{what} is null"));
        BS_ERR_NULL
    })
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), BsStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(BS_ERR_NULL);
    }
    Ok(())
}

/// Message of the last error on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Synthetic market with ground truth.
pub struct BsMarket {
    inner: SynthMarket,
}

/// Generates a synthetic market. `config_toml` may be null for defaults.
///
/// # Safety
/// `config_toml` must be null or a nul-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_market_generate(config_toml: *const c_char, out: *mut *mut BsMarket) -> BsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg: SynthConfig = match opt_str(config_toml)? {
            Some(t) => toml::from_str(t).map_err(|e| fail(Error::Config(e.to_string())))?,
            None => SynthConfig::default(),
        };
        let m = generate_market(&cfg).map_err(fail)?;
        *out = Box::into_raw(Box::new(BsMarket { inner: m }));
        Ok(())
    })
}

/// Writes trades, funding, categories, wallet transactions and ground truth.
///
/// # Safety
/// `market` must come from [`bs_market_generate`]; `dir` must be a
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_market_write(market: *const BsMarket, dir: *const c_char) -> BsStatus {
    guard(|| {
        non_null(market, "market")?;
        let dir = req_str(dir, "dir")?;
        (*market).inner.write_to(&PathBuf::from(dir)).map_err(fail)
    })
}

/// Number of raw transfers, or 0 for a null handle.
///
/// # Safety
/// `market` must be null or come from [`bs_market_generate`].
#[no_mangle]
pub unsafe extern "C" fn bs_market_transfer_count(market: *const BsMarket) -> usize {
    market.as_ref().map_or(0, |m| m.inner.transfers.len())
}

/// Number of planted run-up events, or 0 for a null handle.
///
/// # Safety
/// `market` must be null or come from [`bs_market_generate`].
#[no_mangle]
pub unsafe extern "C" fn bs_market_event_count(market: *const BsMarket) -> usize {
    market.as_ref().map_or(0, |m| m.inner.truth.events.len())
}

/// # Safety
/// `market` must be null or come from [`bs_market_generate`] and not be
/// freed twice.
#[no_mangle]
pub unsafe extern "C" fn bs_market_free(market: *mut BsMarket) {
    if !market.is_null() {
        drop(Box::from_raw(market));
    }
}

/// Pipeline bound to a configuration and an artifacts directory.
pub struct BsPipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    ws: Workspace,
}

/// Creates a pipeline. `config_toml` may be null for defaults.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_pipeline_new(
    config_toml: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut BsPipeline,
) -> BsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let cfg = match opt_str(config_toml)? {
            Some(t) => PipelineConfig::from_toml(t).map_err(fail)?,
            None => PipelineConfig::default(),
        };
        let dir = PathBuf::from(req_str(out_dir, "out_dir")?);
        let ws = Workspace::new(&dir).map_err(fail)?;
        *out = Box::into_raw(Box::new(BsPipeline { cfg, out: dir, ws }));
        Ok(())
    })
}

/// Runs one stage by name (`ingest`, `panel`, `detect`, `wash`, `agents`,
/// `regress`, `backtest`).
///
/// # Safety
/// `pipeline` must come from [`bs_pipeline_new`]; `stage` must be a
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_pipeline_run_stage(pipeline: *mut BsPipeline, stage: *const c_char) -> BsStatus {
    guard(|| {
        non_null(pipeline, "pipeline")?;
        let stage: Stage = req_str(stage, "stage")?.parse().map_err(fail)?;
        let p = &mut *pipeline;
        run_stage(&mut p.ws, stage, &p.cfg).map_err(fail)
    })
}

/// Runs every configured stage and writes `manifest.json`.
///
/// # Safety
/// `pipeline` must come from [`bs_pipeline_new`].
#[no_mangle]
pub unsafe extern "C" fn bs_pipeline_run(pipeline: *mut BsPipeline) -> BsStatus {
    guard(|| {
        non_null(pipeline, "pipeline")?;
        let p = &mut *pipeline;
        run_pipeline(&p.cfg, &p.out).map_err(fail)?;
        p.ws = Workspace::new(&p.out).map_err(fail)?;
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be null or come from [`bs_pipeline_new`] and not be freed
/// twice.
#[no_mangle]
pub unsafe extern "C" fn bs_pipeline_free(pipeline: *mut BsPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// First-digit test result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BsBenford {
    pub observed: [f64; 9],
    pub expected: [f64; 9],
    pub chi2: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Benford first-digit test on `n` values.
///
/// # Safety
/// `values` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_benford(values: *const f64, n: usize, out: *mut BsBenford) -> BsStatus {
    guard(|| {
        non_null(values, "values")?;
        non_null(out, "out")?;
        let r = benford_test(std::slice::from_raw_parts(values, n)).map_err(fail)?;
        *out = BsBenford {
            observed: r.observed,
            expected: r.expected,
            chi2: r.chi2,
            p_value: r.p_value,
            n: r.n,
        };
        Ok(())
    })
}

/// Hill power-law density exponent over the top `tail_fraction` of values.
///
/// # Safety
/// `values` must point to `n` doubles; `alpha` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_powerlaw_alpha(
    values: *const f64,
    n: usize,
    tail_fraction: f64,
    alpha: *mut f64,
) -> BsStatus {
    guard(|| {
        non_null(values, "values")?;
        non_null(alpha, "alpha")?;
        let fit = powerlaw_exponent(std::slice::from_raw_parts(values, n), tail_fraction).map_err(fail)?;
        *alpha = fit.alpha;
        Ok(())
    })
}
