//! C ABI over the micronas deployment path: load a model file and a
//! latency table, run windows through the reference interpreter, and
//! cost the architecture.
//!
//! Every fallible function returns one of the `MN_*` status codes. On a
//! non-zero status, `mn_last_error` holds a message for the calling
//! thread. Handles are opaque and must be released with their `_free`
//! function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use micronas::deploy::{import_model, reference_interpret, replay_cost, DeployError, TrainedModel};
use micronas::hwcost::{HardwareModel, HwError, LatencyTable, Precision};
use micronas::space::SuperNet;
use micronas::tensor::Tensor3;

pub const MN_OK: i32 = 0;
/// A required pointer argument was NULL.
pub const MN_ERR_NULL: i32 = 1;
/// A file could not be read.
pub const MN_ERR_IO: i32 = 2;
/// A model or table file is malformed or has an unsupported version.
pub const MN_ERR_FORMAT: i32 = 3;
/// An argument does not fit the model (length, shape, missing int8 data).
pub const MN_ERR_INPUT: i32 = 4;
/// The latency table lacks an operator the model uses.
pub const MN_ERR_MISSING_ENTRY: i32 = 5;
/// An output buffer is too small.
pub const MN_ERR_BUFFER: i32 = 6;
/// Any other failure, including a caught panic.
pub const MN_ERR_INTERNAL: i32 = 7;

/// A loaded model.
pub struct MnModel {
    model: TrainedModel,
}

/// A loaded latency table.
pub struct MnTable {
    table: LatencyTable,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(i32, String);

impl From<DeployError> for Failure {
    fn from(e: DeployError) -> Self {
        let code = match &e {
            DeployError::Io(_) => MN_ERR_IO,
            DeployError::Format(_) | DeployError::Version { .. } | DeployError::Json(_) => MN_ERR_FORMAT,
            DeployError::Input(_) | DeployError::Tensor(_) => MN_ERR_INPUT,
            DeployError::Hw(h) => return h_code(h, e.to_string()),
            _ => MN_ERR_INTERNAL,
        };
        Failure(code, e.to_string())
    }
}

fn h_code(e: &HwError, msg: String) -> Failure {
    let code = match e {
        HwError::MissingEntry(_) | HwError::MissingRows(_) => MN_ERR_MISSING_ENTRY,
        HwError::Io(_) => MN_ERR_IO,
        HwError::Json(_) | HwError::Version(_) => MN_ERR_FORMAT,
        _ => MN_ERR_INTERNAL,
    };
    Failure(code, msg)
}

impl From<HwError> for Failure {
    fn from(e: HwError) -> Self {
        let msg = e.to_string();
        h_code(&e, msg)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MN_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MN_ERR_INTERNAL
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MN_ERR_NULL, format!("{what} is NULL"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure(MN_ERR_INPUT, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const MnModel) -> Result<&'a TrainedModel, Failure> {
    m.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn table_arg<'a>(t: *const MnTable) -> Result<&'a LatencyTable, Failure> {
    t.as_ref().map(|t| &t.table).ok_or_else(|| null("table"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model file (float or int8 storage).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mn_model_load(path: *const c_char, out: *mut *mut MnModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = import_model(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MnModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `mn_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mn_model_free(model: *mut MnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length, channel count and class count of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_shape(model: *const MnModel, window_len: *mut usize, channels: *mut usize, classes: *mut usize) -> i32 {
    guard(|| {
        let m = model_arg(model)?;
        if window_len.is_null() || channels.is_null() || classes.is_null() {
            return Err(null("output pointer"));
        }
        let s = m.network.input_shape();
        *window_len = s.t;
        *channels = s.s;
        *classes = m.network.classes();
        Ok(())
    })
}

/// 1 if the model carries int8 parameters, 0 otherwise.
///
/// # Safety
/// `model` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn mn_model_has_int8(model: *const MnModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.model.quant.is_some()))
}

/// Classifies one raw window of `window_len * channels` values, time-major
/// (all channels of step 0, then step 1, ...). The window is normalized
/// with the statistics stored in the model. Writes `classes` probabilities.
///
/// # Safety
/// `window` must hold `len` values and `probs` room for `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn mn_model_predict(
    model: *const MnModel,
    window: *const f64,
    len: usize,
    int8: i32,
    probs: *mut f64,
    probs_len: usize,
) -> i32 {
    guard(|| {
        let m = model_arg(model)?;
        if window.is_null() || probs.is_null() {
            return Err(null("buffer"));
        }
        let shape = m.network.input_shape();
        if len != shape.len() {
            return Err(Failure(MN_ERR_INPUT, format!("window has {len} values, model expects {}", shape.len())));
        }
        let classes = m.network.classes();
        if probs_len < classes {
            return Err(Failure(MN_ERR_BUFFER, format!("probability buffer holds {probs_len}, model has {classes} classes")));
        }
        let data = std::slice::from_raw_parts(window, len).to_vec();
        let mut x = Tensor3::new(shape, data).map_err(|e| Failure(MN_ERR_INPUT, e.to_string()))?;
        if let Some(n) = &m.normalization {
            n.apply(&mut x).map_err(|e| Failure(MN_ERR_INPUT, e.to_string()))?;
        }
        let out = reference_interpret(m, &x, None, int8 != 0)?;
        std::slice::from_raw_parts_mut(probs, classes).copy_from_slice(&out.probs);
        Ok(())
    })
}

/// Loads a latency table.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mn_table_load(path: *const c_char, out: *mut *mut MnTable) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let table = LatencyTable::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MnTable { table }));
        Ok(())
    })
}

/// # Safety
/// `table` must come from `mn_table_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mn_table_free(table: *mut MnTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Int8 latency and peak memory measured by replaying the model's
/// operators against the table.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_replay(model: *const MnModel, table: *const MnTable, latency_ms: *mut f64, peak_mem_bytes: *mut u64) -> i32 {
    guard(|| {
        let m = model_arg(model)?;
        let t = table_arg(table)?;
        if latency_ms.is_null() || peak_mem_bytes.is_null() {
            return Err(null("output pointer"));
        }
        let (lat, mem) = replay_cost(&m.network, t, Precision::Int8)?;
        *latency_ms = lat;
        *peak_mem_bytes = mem;
        Ok(())
    })
}

/// Int8 latency and peak memory of the model's architecture from the
/// table-based estimator used during search.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_estimate(model: *const MnModel, table: *const MnTable, latency_ms: *mut f64, peak_mem_bytes: *mut f64) -> i32 {
    guard(|| {
        let m = model_arg(model)?;
        let t = table_arg(table)?;
        if latency_ms.is_null() || peak_mem_bytes.is_null() {
            return Err(null("output pointer"));
        }
        let net = SuperNet::new(&m.descriptor.space_config, 0).map_err(|e| Failure(MN_ERR_INPUT, e.to_string()))?;
        let hw = HardwareModel::new(net.layout(), t, Precision::Int8)?;
        let est = hw.estimate_descriptor(&m.descriptor)?;
        *latency_ms = est.latency_ms;
        *peak_mem_bytes = est.peak_mem_bytes;
        Ok(())
    })
}
