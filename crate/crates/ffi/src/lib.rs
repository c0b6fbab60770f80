//! C ABI for the gdistill engine.
//!
//! Every function returns a [`GdStatus`]; outputs go through pointer
//! arguments. Objects cross the boundary as opaque handles that the caller
//! releases with the matching `*_free` function. On failure the message is
//! kept per thread and can be read with [`gd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gdistill::config::{parse_config, ExperimentConfig};
use gdistill::ensemble::q_predict;
use gdistill::metrics::{acc, fgt, AccuracyMatrix};
use gdistill::nnet::{softmax_rows, softmax_temperature, Matrix, Model};
use gdistill::runner::{run_experiment, ExperimentSummary};
use gdistill::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    Numeric = 4,
    Io = 5,
    Contract = 6,
    Panic = 7,
}

pub struct GdConfig(ExperimentConfig);
pub struct GdModel(Model);
pub struct GdResults(ExperimentSummary);

/// Aggregate metrics of one variant.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GdAggregate {
    pub seeds: usize,
    pub failed: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub fgt_mean: f64,
    pub fgt_std: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> GdStatus {
    match err {
        Error::InvalidInput(_) | Error::MissingClass { .. } | Error::TooFewStages(_) => GdStatus::InvalidInput,
        Error::InvalidConfig(_) | Error::ConfigKey { .. } => GdStatus::InvalidConfig,
        Error::NonFinite { .. } => GdStatus::Numeric,
        Error::Contract(_) => GdStatus::Contract,
        Error::Checkpoint(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => GdStatus::Io,
    }
}

struct Fail(GdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GdStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(GdStatus::InvalidInput, msg.into())
}

/// Runs `f`, recording its error and turning panics into [`GdStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            GdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the last error of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length, or 0 when the
/// last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parses a TOML config. A null `text` yields the defaults.
///
/// # Safety
/// `text` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_config_parse(text: *const c_char, out: *mut *mut GdConfig) -> GdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if text.is_null() { ExperimentConfig::default() } else { parse_config(str_arg(text, "text")?)? };
        *out = Box::into_raw(Box::new(GdConfig(cfg)));
        Ok(())
    })
}

/// Serializes a config as TOML; free the string with [`gd_string_free`].
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_config_to_toml(config: *const GdConfig, out: *mut *mut c_char) -> GdStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(cfg.0.to_toml()).map_err(|_| invalid("config contains NUL"))?.into_raw();
        Ok(())
    })
}

/// Number of seeds and variants in a config.
///
/// # Safety
/// `config` must be a live handle; the outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn gd_config_grid(config: *const GdConfig, seeds: *mut usize, variants: *mut usize) -> GdStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if let Some(s) = seeds.as_mut() {
            *s = cfg.0.seeds.len();
        }
        if let Some(v) = variants.as_mut() {
            *v = cfg.0.variants.len();
        }
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from [`gd_config_parse`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gd_config_free(config: *mut GdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the whole grid and writes results under `out_dir` (the config's
/// `output_dir` when null).
///
/// # Safety
/// `config` must be a live handle, `out_dir` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gd_run_experiment(
    config: *const GdConfig,
    out_dir: *const c_char,
    out: *mut *mut GdResults,
) -> GdStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = if out_dir.is_null() { PathBuf::from(&cfg.0.output_dir) } else { PathBuf::from(str_arg(out_dir, "out_dir")?) };
        let summary = run_experiment(&cfg.0, &dir)?;
        *out = Box::into_raw(Box::new(GdResults(summary)));
        Ok(())
    })
}

/// # Safety
/// `results` must be a live handle; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn gd_results_variant_count(results: *const GdResults, count: *mut usize) -> GdStatus {
    guard(|| {
        let r = results.as_ref().ok_or_else(|| null("results"))?;
        *count.as_mut().ok_or_else(|| null("count"))? = r.0.aggregate.len();
        Ok(())
    })
}

/// Aggregate row `index` and its variant name (free with [`gd_string_free`];
/// pass null to skip).
///
/// # Safety
/// `results` must be a live handle; `row` writable; `name` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gd_results_aggregate(
    results: *const GdResults,
    index: usize,
    row: *mut GdAggregate,
    name: *mut *mut c_char,
) -> GdStatus {
    guard(|| {
        let r = results.as_ref().ok_or_else(|| null("results"))?;
        let a = r.0.aggregate.get(index).ok_or_else(|| invalid(format!("variant index {index} out of range")))?;
        *row.as_mut().ok_or_else(|| null("row"))? = GdAggregate {
            seeds: a.seeds,
            failed: a.failed,
            acc_mean: a.acc_mean,
            acc_std: a.acc_std,
            fgt_mean: a.fgt_mean,
            fgt_std: a.fgt_std,
        };
        if !name.is_null() {
            *name = CString::new(a.variant.clone()).map_err(|_| invalid("name contains NUL"))?.into_raw();
        }
        Ok(())
    })
}

/// # Safety
/// `results` must be null or a handle from [`gd_run_experiment`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gd_results_free(results: *mut GdResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

/// Loads a model checkpoint written by the runner.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gd_model_load(path: *const c_char, out: *mut *mut GdModel) -> GdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let file = std::fs::File::open(path).map_err(Error::from)?;
        let model = Model::read_checkpoint(std::io::BufReader::new(file))?;
        *out = Box::into_raw(Box::new(GdModel(model)));
        Ok(())
    })
}

/// Input width and number of classes over all heads.
///
/// # Safety
/// `model` must be a live handle; the outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn gd_model_shape(model: *const GdModel, input_dim: *mut usize, num_classes: *mut usize) -> GdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if let Some(d) = input_dim.as_mut() {
            *d = m.0.input_dim();
        }
        if let Some(k) = num_classes.as_mut() {
            *k = m.0.num_classes();
        }
        Ok(())
    })
}

/// Class probabilities over all heads for `rows` row-major inputs.
/// `out` holds `rows * num_classes` values.
///
/// # Safety
/// `inputs` must hold `rows * input_dim` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gd_model_predict_proba(
    model: *const GdModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> GdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let x = slice_arg(inputs, rows * m.input_dim(), "inputs")?;
        if out_len != rows * m.num_classes() {
            return Err(invalid(format!("out_len must be {}", rows * m.num_classes())));
        }
        let out = out_slice(out, out_len, "out")?;
        let x = Matrix::from_vec(rows, m.input_dim(), x.to_vec())?;
        let p = softmax_rows(&m.logits(&x, m.all_heads())?, 1.0);
        out.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`gd_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gd_model_free(model: *mut GdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Softmax of `n` logits at temperature `gamma`.
///
/// # Safety
/// `logits` and `out` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn gd_softmax(logits: *const f64, n: usize, gamma: f64, out: *mut f64) -> GdStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("no logits"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("temperature must be positive"));
        }
        let z = slice_arg(logits, n, "logits")?;
        out_slice(out, n, "out")?.copy_from_slice(&softmax_temperature(z, gamma));
        Ok(())
    })
}

/// Ensemble target from the previous model's distribution over `n_prev`
/// classes and the current teacher's over `n_cur`; `out` holds
/// `n_prev + n_cur` values. `epsilon` may be null.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn gd_q_predict(
    p_prev: *const f64,
    n_prev: usize,
    p_cur: *const f64,
    n_cur: usize,
    out: *mut f64,
    epsilon: *mut f64,
) -> GdStatus {
    guard(|| {
        let a = slice_arg(p_prev, n_prev, "p_prev")?;
        let b = slice_arg(p_cur, n_cur, "p_cur")?;
        let q = q_predict(a, b)?;
        out_slice(out, n_prev + n_cur, "out")?.copy_from_slice(&q.probs);
        if let Some(e) = epsilon.as_mut() {
            *e = q.epsilon;
        }
        Ok(())
    })
}

unsafe fn matrix_arg(packed: *const f64, task_sizes: *const usize, stages: usize) -> Result<AccuracyMatrix, Fail> {
    if task_sizes.is_null() {
        return Err(null("task_sizes"));
    }
    let sizes = std::slice::from_raw_parts(task_sizes, stages).to_vec();
    let values = slice_arg(packed, stages * (stages + 1) / 2, "accuracies")?;
    let mut rows = Vec::with_capacity(stages);
    let mut at = 0;
    for s in 0..stages {
        rows.push(values[at..at + s + 1].to_vec());
        at += s + 1;
    }
    Ok(AccuracyMatrix::from_rows(sizes, rows)?)
}

/// ACC and FGT of a lower-triangular accuracy matrix packed by stage:
/// `A[0][0], A[0][1], A[1][1], A[0][2], ...` (task index first, stage second).
///
/// # Safety
/// `accuracies` must hold `stages * (stages + 1) / 2` values, `task_sizes`
/// `stages` values; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn gd_metrics(
    accuracies: *const f64,
    task_sizes: *const usize,
    stages: usize,
    acc_out: *mut f64,
    fgt_out: *mut f64,
) -> GdStatus {
    guard(|| {
        let m = matrix_arg(accuracies, task_sizes, stages)?;
        let (a, f) = (acc(&m)?, fgt(&m)?);
        if let Some(o) = acc_out.as_mut() {
            *o = a;
        }
        if let Some(o) = fgt_out.as_mut() {
            *o = f;
        }
        Ok(())
    })
}
