//! C bindings for the punet library.
//!
//! Every function returns a [`PunetStatus`]; on failure a human-readable
//! message is stored per thread and readable through [`punet_last_error`].
//! Handles returned through out-pointers are owned by the caller and must be
//! released with the matching `_free` function. Panics never cross the
//! boundary; they surface as [`PunetStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use punet::commands::{self, EvalOptions, LoadedRun};
use punet::metrics::{ged, wilcoxon_signed_rank, PairedMetricSeries, WilcoxonMethod};

/// Status codes shared with the CLI's exit codes (2-7); codes from 64 up are
/// conditions only the C boundary can produce.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PunetStatus {
    Ok = 0,
    /// Invalid configuration value or combination.
    Config = 2,
    /// Input data is unusable (too few samples, mismatched series, ...).
    Data = 3,
    /// File could not be read or written.
    Io = 4,
    /// File exists but does not parse.
    Format = 5,
    /// Array or tensor sizes disagree.
    Shape = 6,
    /// Numerical failure (non-finite value, failed factorization, ...).
    Numeric = 7,
    /// A required pointer argument was null.
    NullArgument = 64,
    /// A string argument was not valid UTF-8.
    Utf8 = 65,
    /// An internal panic was caught at the boundary.
    Panic = 66,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " ")).expect("nul bytes stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

enum Failure {
    Core(punet::Error),
    Invalid(PunetStatus, String),
}

impl From<punet::Error> for Failure {
    fn from(err: punet::Error) -> Self {
        Failure::Core(err)
    }
}

fn status_of(err: &punet::Error) -> PunetStatus {
    match err.exit_code() {
        2 => PunetStatus::Config,
        3 => PunetStatus::Data,
        4 => PunetStatus::Io,
        5 => PunetStatus::Format,
        6 => PunetStatus::Shape,
        _ => PunetStatus::Numeric,
    }
}

/// Runs a fallible body, converting errors and panics into a status code
/// plus a stored message.
fn boundary(body: impl FnOnce() -> Result<(), Failure>) -> PunetStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PunetStatus::Ok,
        Ok(Err(Failure::Core(err))) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Ok(Err(Failure::Invalid(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            set_error(&format!("internal panic: {message}"));
            PunetStatus::Panic
        }
    }
}

unsafe fn text_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::Invalid(
            PunetStatus::NullArgument,
            format!("{name} is null"),
        ));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::Invalid(PunetStatus::Utf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Invalid(
            PunetStatus::NullArgument,
            format!("{name} is null but its length is {len}"),
        ));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// Writes through an optional out-pointer.
unsafe fn put<T>(ptr: *mut T, value: T) {
    if !ptr.is_null() {
        ptr.write(value);
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn punet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on the calling thread. Never null;
/// empty when no failure has occurred. The pointer is valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn punet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generates a synthetic multi-rater corpus described by the TOML file at
/// `config_path` into `out_dir`. A null `config_path` uses the built-in
/// default corpus settings.
///
/// # Safety
/// Both arguments must be NUL-terminated strings or null.
#[no_mangle]
pub unsafe extern "C" fn punet_generate_data(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> PunetStatus {
    boundary(|| {
        let config_path = if config_path.is_null() {
            None
        } else {
            Some(text_arg(config_path, "config_path")?)
        };
        let out_dir = text_arg(out_dir, "out_dir")?;
        commands::gen_data(config_path.map(Path::new), Path::new(out_dir), None)?;
        Ok(())
    })
}

/// Trains the experiment described by the TOML file at `config_path` and
/// writes checkpoints, logs, and the resolved config into `run_dir`. The
/// config's `dataset` entry must point at a generated corpus.
///
/// # Safety
/// Both path arguments must be NUL-terminated strings or null.
#[no_mangle]
pub unsafe extern "C" fn punet_train(
    config_path: *const c_char,
    run_dir: *const c_char,
    verbose: bool,
) -> PunetStatus {
    boundary(|| {
        let config_path = text_arg(config_path, "config_path")?;
        let run_dir = text_arg(run_dir, "run_dir")?;
        commands::train_cmd(Path::new(config_path), Path::new(run_dir), None, verbose)?;
        Ok(())
    })
}

/// Evaluates a trained run on its test split, writing `eval.csv` and
/// `summary.json` into `run_dir`. `n_samples` of 0 keeps the config's
/// setting. The median test score is written through `median_score` when it
/// is non-null.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string or null; `median_score` must be
/// null or valid for one f64 write.
#[no_mangle]
pub unsafe extern "C" fn punet_evaluate(
    run_dir: *const c_char,
    n_samples: usize,
    median_score: *mut f64,
) -> PunetStatus {
    boundary(|| {
        let run_dir = text_arg(run_dir, "run_dir")?;
        let options = EvalOptions {
            n_samples: (n_samples > 0).then_some(n_samples),
            ..EvalOptions::default()
        };
        let out = commands::eval_cmd(Path::new(run_dir), &options)?;
        put(median_score, out.summary.score.median);
        Ok(())
    })
}

/// A trained run loaded into memory; create with [`punet_model_load`] and
/// release with [`punet_model_free`].
pub struct PunetModel {
    inner: LoadedRun,
}

/// Loads a trained run (resolved config plus checkpoints) from `run_dir`
/// and stores the handle through `out_model`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string or null; `out_model` must be
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn punet_model_load(
    run_dir: *const c_char,
    out_model: *mut *mut PunetModel,
) -> PunetStatus {
    boundary(|| {
        let run_dir = text_arg(run_dir, "run_dir")?;
        if out_model.is_null() {
            return Err(Failure::Invalid(
                PunetStatus::NullArgument,
                "out_model is null".to_string(),
            ));
        }
        let inner = commands::load_run(Path::new(run_dir))?;
        out_model.write(Box::into_raw(Box::new(PunetModel { inner })));
        Ok(())
    })
}

/// Square image edge the model was trained on, or 0 for a null handle.
///
/// # Safety
/// `model` must be a handle from [`punet_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn punet_model_image_size(model: *const PunetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.image_size())
}

/// Number of masks a prediction request for `n_samples` returns: sampling
/// families honor `n_samples`, the plain U-Net returns 1, and an ensemble
/// returns one mask per member. Returns 0 for a null handle.
///
/// # Safety
/// `model` must be a handle from [`punet_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn punet_model_mask_count(
    model: *const PunetModel,
    n_samples: usize,
) -> usize {
    model.as_ref().map_or(0, |m| m.inner.mask_count(n_samples))
}

/// Draws segmentation masks for one raw image of `image_len` row-major
/// pixels in `[0, 1]` (normalization is applied internally). Masks are
/// written mask-major into `masks_out` as 0/1 bytes, `image_len` bytes per
/// mask; `capacity` is the buffer size in bytes. The number of masks written
/// is stored through `n_masks_out` when it is non-null.
///
/// # Safety
/// `model` must come from [`punet_model_load`]; `image` must hold
/// `image_len` doubles; `masks_out` must hold `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn punet_model_predict(
    model: *mut PunetModel,
    image: *const f64,
    image_len: usize,
    n_samples: usize,
    seed: u64,
    masks_out: *mut u8,
    capacity: usize,
    n_masks_out: *mut usize,
) -> PunetStatus {
    boundary(|| {
        let model = model.as_mut().ok_or_else(|| {
            Failure::Invalid(PunetStatus::NullArgument, "model is null".to_string())
        })?;
        let image = slice_arg(image, image_len, "image")?;
        let masks = model.inner.predict(image, n_samples, seed)?;
        let needed = masks.len() * image_len;
        if capacity < needed {
            return Err(Failure::Invalid(
                PunetStatus::Shape,
                format!(
                    "mask buffer holds {capacity} bytes but {} masks need {needed}",
                    masks.len()
                ),
            ));
        }
        if masks_out.is_null() && needed > 0 {
            return Err(Failure::Invalid(
                PunetStatus::NullArgument,
                "masks_out is null".to_string(),
            ));
        }
        for (i, mask) in masks.iter().enumerate() {
            for (j, &on) in mask.iter().enumerate() {
                masks_out.add(i * image_len + j).write(u8::from(on));
            }
        }
        put(n_masks_out, masks.len());
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be a handle from [`punet_model_load`] or null, and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn punet_model_free(model: *mut PunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generalized energy distance between a prediction set and a reference set
/// of binary masks, with its decomposition. `preds` holds `n_pred` masks of
/// `pixels` bytes each (nonzero means foreground), `labels` likewise;
/// `n_pred` must be at least 2 and `n_label` at least 1. Each out-pointer
/// may be null.
///
/// # Safety
/// The mask buffers must hold `n_pred * pixels` and `n_label * pixels`
/// bytes; each non-null out-pointer must be valid for one f64 write.
#[no_mangle]
pub unsafe extern "C" fn punet_ged(
    preds: *const u8,
    n_pred: usize,
    labels: *const u8,
    n_label: usize,
    pixels: usize,
    ged_squared: *mut f64,
    cross: *mut f64,
    pred_diversity: *mut f64,
    label_diversity: *mut f64,
) -> PunetStatus {
    boundary(|| {
        let preds = slice_arg(preds, n_pred * pixels, "preds")?;
        let labels = slice_arg(labels, n_label * pixels, "labels")?;
        let unpack = |bytes: &[u8]| -> Vec<Vec<bool>> {
            bytes.chunks(pixels).map(|m| m.iter().map(|&b| b != 0).collect()).collect()
        };
        let report = ged(&unpack(preds), &unpack(labels))?;
        put(ged_squared, report.ged_squared);
        put(cross, report.cross);
        put(pred_diversity, report.pred_diversity);
        put(label_diversity, report.label_diversity);
        Ok(())
    })
}

/// Two-sided Wilcoxon signed-rank test on paired series `a` and `b` of
/// length `len`. Writes the W+ statistic, the p-value, the number of
/// informative (nonzero-difference) pairs, and whether the p-value came from
/// exact enumeration rather than the normal approximation; each out-pointer
/// may be null.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; each non-null out-pointer must be
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn punet_wilcoxon(
    a: *const f64,
    b: *const f64,
    len: usize,
    statistic: *mut f64,
    p_value: *mut f64,
    n_used: *mut usize,
    exact: *mut bool,
) -> PunetStatus {
    boundary(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        let ids = (0..len).map(|i| i.to_string()).collect();
        let series = PairedMetricSeries::new(ids, a.to_vec(), b.to_vec())?;
        let test = wilcoxon_signed_rank(&series)?;
        put(statistic, test.statistic);
        put(p_value, test.p_value);
        put(n_used, test.n_used);
        put(exact, test.method == WilcoxonMethod::Exact);
        Ok(())
    })
}
