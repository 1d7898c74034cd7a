//! C ABI over the mpseg toolkit.
//!
//! Every fallible function returns an [`MpsegStatus`]; on failure a message
//! is available from [`mpseg_last_error`] on the same thread. Objects are
//! handed out as opaque pointers and released with their `_free` function.

use mpseg::checkpoint;
use mpseg::cli::CliError;
use mpseg::config::RunConfig;
use mpseg::data::{Dataset, SynthConfig};
use mpseg::decoder::{inference_forward, DecoderParams};
use mpseg::eval::evaluate;
use mpseg::maskops::{iou, BinaryMask};
use mpseg::matching::{hungarian, CostMatrix};
use mpseg::report::MetricsReport;
use mpseg::train::train;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

/// Result of every fallible call. Values 1 to 5 match the command-line exit
/// codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpsegStatus {
    Ok = 0,
    CheckFailed = 1,
    Config = 2,
    Io = 3,
    Numeric = 4,
    Compat = 5,
    NullArgument = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Generated or loaded scenes.
pub struct MpsegDataset {
    inner: Dataset,
}

/// Decoder parameters.
pub struct MpsegModel {
    inner: DecoderParams,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MpsegDims {
    pub num_queries: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub num_categories: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: MpsegStatus,
    message: String,
}

impl Failure {
    fn new(status: MpsegStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

fn status_of(code: i32) -> MpsegStatus {
    match code {
        1 => MpsegStatus::CheckFailed,
        2 => MpsegStatus::Config,
        3 => MpsegStatus::Io,
        4 => MpsegStatus::Numeric,
        _ => MpsegStatus::Compat,
    }
}

impl<E> From<E> for Failure
where
    CliError: From<E>,
{
    fn from(e: E) -> Self {
        let e = CliError::from(e);
        Failure::new(status_of(e.code), e.message)
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|l| *l.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpsegStatus {
    LAST_ERROR.with(|l| *l.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpsegStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.message);
            e.status
        }
        Err(_) => {
            set_error("internal panic");
            MpsegStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure::new(MpsegStatus::NullArgument, "null pointer argument")
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(MpsegStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn opt_str_arg<'a>(p: *const c_char) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p).map(Some)
    }
}

unsafe fn obj<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null());
    }
    out.write(v);
    Ok(())
}

fn config_failure(e: serde_json::Error) -> Failure {
    Failure::new(MpsegStatus::Config, e.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn mpseg_last_error() -> *const c_char {
    LAST_ERROR.with(|l| l.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Generates a dataset from a JSON synth config (null for defaults).
///
/// # Safety
/// `synth_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_generate(
    synth_json: *const c_char,
    out: *mut *mut MpsegDataset,
) -> MpsegStatus {
    guard(|| {
        let cfg: SynthConfig = match opt_str_arg(synth_json)? {
            Some(s) => serde_json::from_str(s).map_err(config_failure)?,
            None => SynthConfig::default(),
        };
        let inner = Dataset::generate(&cfg)?;
        put(out, Box::into_raw(Box::new(MpsegDataset { inner })))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_load(path: *const c_char, out: *mut *mut MpsegDataset) -> MpsegStatus {
    guard(|| {
        let inner = Dataset::load(&PathBuf::from(str_arg(path)?))?;
        put(out, Box::into_raw(Box::new(MpsegDataset { inner })))
    })
}

/// # Safety
/// `ds` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_save(ds: *const MpsegDataset, path: *const c_char) -> MpsegStatus {
    guard(|| Ok(obj(ds)?.inner.save(&PathBuf::from(str_arg(path)?))?))
}

/// # Safety
/// `ds` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_num_scenes(ds: *const MpsegDataset, out: *mut usize) -> MpsegStatus {
    guard(|| put(out, obj(ds)?.inner.scenes.len()))
}

/// # Safety
/// `ds` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_num_instances(
    ds: *const MpsegDataset,
    scene: usize,
    out: *mut usize,
) -> MpsegStatus {
    guard(|| {
        let s = obj(ds)?
            .inner
            .scenes
            .get(scene)
            .ok_or_else(|| Failure::new(MpsegStatus::InvalidArgument, format!("no scene {scene}")))?;
        put(out, s.instances.len())
    })
}

/// # Safety
/// `ds` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mpseg_dataset_free(ds: *mut MpsegDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains with a JSON run config (null for defaults) on `ds`; the config's
/// synth section is replaced by the dataset's own.
///
/// # Safety
/// `run_json` is null or a NUL-terminated string; `ds` comes from this
/// library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_train(
    run_json: *const c_char,
    ds: *const MpsegDataset,
    out: *mut *mut MpsegModel,
) -> MpsegStatus {
    guard(|| {
        let mut cfg = match opt_str_arg(run_json)? {
            Some(s) => RunConfig::from_json(s)?,
            None => RunConfig::default(),
        };
        let ds = &obj(ds)?.inner;
        cfg.synth = ds.config.clone();
        let outcome = train(&cfg, ds, |_| {})?;
        put(out, Box::into_raw(Box::new(MpsegModel { inner: outcome.params })))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_load(path: *const c_char, out: *mut *mut MpsegModel) -> MpsegStatus {
    guard(|| {
        let inner = checkpoint::load(&PathBuf::from(str_arg(path)?))?;
        put(out, Box::into_raw(Box::new(MpsegModel { inner })))
    })
}

/// # Safety
/// `model` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_save(model: *const MpsegModel, path: *const c_char) -> MpsegStatus {
    guard(|| Ok(checkpoint::save(&obj(model)?.inner, &PathBuf::from(str_arg(path)?))?))
}

/// # Safety
/// `model` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_dims(model: *const MpsegModel, out: *mut MpsegDims) -> MpsegStatus {
    guard(|| {
        let d = obj(model)?.inner.dims;
        put(
            out,
            MpsegDims {
                num_queries: d.num_queries,
                num_layers: d.num_layers,
                dim: d.dim,
                ffn_dim: d.ffn_dim,
                num_categories: d.num_categories,
            },
        )
    })
}

/// # Safety
/// `model` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_free(model: *mut MpsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Final-layer mask logits of one scene, row-major `num_queries × H × W`.
/// `out_len` always receives the required length; when `capacity` is too
/// small nothing else is written and `MPSEG_STATUS_INVALID_ARGUMENT` is
/// returned.
///
/// # Safety
/// `model` and `ds` come from this library; `out_logits` holds `capacity`
/// doubles (may be null when `capacity` is 0); `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_predict(
    model: *const MpsegModel,
    ds: *const MpsegDataset,
    scene: usize,
    out_logits: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> MpsegStatus {
    guard(|| {
        let (p, ds) = (&obj(model)?.inner, &obj(ds)?.inner);
        mpseg::eval::check_compatible(p, ds)?;
        let s = ds
            .scenes
            .get(scene)
            .ok_or_else(|| Failure::new(MpsegStatus::InvalidArgument, format!("no scene {scene}")))?;
        let out = inference_forward(&ds.features(s), p);
        let data = out.layers.last().expect("at least one pass").mask_logits.data();
        put(out_len, data.len())?;
        if capacity < data.len() {
            return Err(Failure::new(
                MpsegStatus::InvalidArgument,
                format!("buffer holds {capacity} values, {} needed", data.len()),
            ));
        }
        if out_logits.is_null() {
            return Err(null());
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out_logits, data.len());
        Ok(())
    })
}

/// Evaluates `model` on every scene of `ds` and returns the metrics report
/// text; release it with [`mpseg_string_free`].
///
/// # Safety
/// `model` and `ds` come from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_model_evaluate(
    model: *const MpsegModel,
    ds: *const MpsegDataset,
    out: *mut *mut c_char,
) -> MpsegStatus {
    guard(|| {
        let (p, ds) = (&obj(model)?.inner, &obj(ds)?.inner);
        let scenes: Vec<usize> = (0..ds.scenes.len()).collect();
        let eval = evaluate(p, ds, &scenes, &Default::default())?;
        let report = MetricsReport {
            variant: "-".into(),
            seed: 0,
            config_hash: "-".into(),
            steps: 0,
            epoch_losses: Vec::new(),
            eval,
        };
        let c = CString::new(report.to_text()).expect("report has no NUL");
        put(out, c.into_raw())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mpseg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// IoU of two `height × width` masks given as bytes (nonzero = set). Two
/// empty masks have IoU 1.
///
/// # Safety
/// `a` and `b` each hold `height * width` bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_mask_iou(
    height: usize,
    width: usize,
    a: *const u8,
    b: *const u8,
    out: *mut f64,
) -> MpsegStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null());
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::new(MpsegStatus::InvalidArgument, "extents must be positive"))?;
        let mask = |p: *const u8| {
            let bits = std::slice::from_raw_parts(p, n).iter().map(|&v| v != 0).collect();
            BinaryMask::from_bits(height, width, bits)
        };
        let invalid = |e: mpseg::maskops::MaskError| Failure::new(MpsegStatus::InvalidArgument, e.to_string());
        let v = iou(&mask(a).map_err(invalid)?, &mask(b).map_err(invalid)?).map_err(invalid)?;
        put(out, v)
    })
}

/// Minimum-cost assignment of a row-major `rows × cols` cost matrix.
/// `out_match[r]` receives the matched column of row `r` or -1.
///
/// # Safety
/// `cost` holds `rows * cols` doubles, `out_match` holds `rows` entries and
/// `out_cost` is writable.
#[no_mangle]
pub unsafe extern "C" fn mpseg_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    out_match: *mut isize,
    out_cost: *mut f64,
) -> MpsegStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure::new(MpsegStatus::InvalidArgument, "matrix too large"))?;
        if (n > 0 && cost.is_null()) || (rows > 0 && out_match.is_null()) || out_cost.is_null() {
            return Err(null());
        }
        let data = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(cost, n).to_vec()
        };
        let m = CostMatrix::new(rows, cols, data).map_err(|e| Failure::new(MpsegStatus::InvalidArgument, e.to_string()))?;
        let a = hungarian(&m).map_err(|e| Failure::new(MpsegStatus::Numeric, e.to_string()))?;
        for (r, c) in a.matches.iter().enumerate() {
            out_match.add(r).write(c.map_or(-1, |c| c as isize));
        }
        put(out_cost, a.cost)
    })
}
