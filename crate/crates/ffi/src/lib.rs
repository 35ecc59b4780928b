//! C ABI over the deblurring model and its metrics.
//!
//! Every fallible call returns a [`VdtrStatus`]; on failure the message is
//! available from [`vdtr_last_error_message`] on the same thread. Models are
//! opaque handles created by `vdtr_model_new` / `vdtr_model_load` and released
//! with `vdtr_model_free`. Images are `float64` arrays in channel-first order
//! with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vdtr::checkpoint::Checkpoint;
use vdtr::config::ModelConfig;
use vdtr::metrics::{psnr, ssim};
use vdtr::model::Vdtr;
use vdtr::window::{attention_flop_count, AttnCostConfig, AttnMode};
use vdtr::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VdtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    NonFinite = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VdtrAttnMode {
    Global = 0,
    Window = 1,
}

/// Opaque model handle.
pub struct VdtrModel {
    model: Vdtr,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> VdtrStatus {
    match err {
        Error::Dimension { .. } | Error::Contract(_) => VdtrStatus::Contract,
        Error::Config(_) => VdtrStatus::Config,
        Error::Format(_) => VdtrStatus::Format,
        Error::Io(_) => VdtrStatus::Io,
        Error::NonFiniteLoss { .. } => VdtrStatus::NonFinite,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (VdtrStatus, String)>) -> VdtrStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VdtrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VdtrStatus::Panic
        }
    }
}

fn lift<T>(r: vdtr::Result<T>) -> Result<T, (VdtrStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (VdtrStatus, String) {
    (VdtrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (VdtrStatus, String) {
    (VdtrStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a>(
    p: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [f64], (VdtrStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn image_len(height: usize, width: usize) -> Result<usize, (VdtrStatus, String)> {
    if height == 0 || width == 0 {
        return Err(invalid("image extents must be positive"));
    }
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image extents overflow"))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vdtr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn vdtr_status_string(status: VdtrStatus) -> *const c_char {
    let s: &'static CStr = match status {
        VdtrStatus::Ok => c"ok",
        VdtrStatus::NullPointer => c"null pointer",
        VdtrStatus::InvalidArgument => c"invalid argument",
        VdtrStatus::Contract => c"contract violated",
        VdtrStatus::Config => c"configuration error",
        VdtrStatus::Format => c"format error",
        VdtrStatus::Io => c"i/o error",
        VdtrStatus::NonFinite => c"non-finite value",
        VdtrStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Fresh desk-preset model with `neighbors` frames on each side of the
/// reference. A fresh model returns the central frame unchanged.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vdtr_model_new(
    seed: u64,
    neighbors: usize,
    out: *mut *mut VdtrModel,
) -> VdtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig {
            neighbors,
            ..ModelConfig::desk()
        };
        let model = lift(Vdtr::new(&cfg, seed))?;
        *out = Box::into_raw(Box::new(VdtrModel { model }));
        Ok(())
    })
}

/// Model stored in a checkpoint file. `*out` is left untouched on failure.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdtr_model_load(
    path: *const c_char,
    out: *mut *mut VdtrModel,
) -> VdtrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let model = lift(Checkpoint::load(Path::new(path)).and_then(|c| c.model()))?;
        *out = Box::into_raw(Box::new(VdtrModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vdtr_model_free(model: *mut VdtrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frames per clip (`2N+1`), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vdtr_model_frames(model: *const VdtrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.frames())
}

/// Restores the central frame of a clip.
///
/// `frames` holds `num_frames` consecutive `3×height×width` images; `out`
/// receives one clamped `3×height×width` image.
///
/// # Safety
/// `model` must be a live handle; `frames` must hold
/// `num_frames·3·height·width` values and `out` `3·height·width` writable
/// values, not overlapping.
#[no_mangle]
pub unsafe extern "C" fn vdtr_model_deblur(
    model: *const VdtrModel,
    frames: *const f64,
    num_frames: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> VdtrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if num_frames != m.config.frames() {
            return Err(invalid(format!(
                "model expects {} frames, got {num_frames}",
                m.config.frames()
            )));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = image_len(height, width)?;
        let all = slice(frames, n * num_frames, "frames")?;
        let clip = all
            .chunks_exact(n)
            .map(|f| Tensor::new(&[3, height, width], f.to_vec()))
            .collect::<vdtr::Result<Vec<_>>>();
        let restored = lift(clip.and_then(|c| m.restore(&c)))?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(restored.data());
        Ok(())
    })
}

/// PSNR in dB between two arrays of `len` values, capped at 99 dB.
///
/// # Safety
/// `pred` and `target` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdtr_psnr(
    pred: *const f64,
    target: *const f64,
    len: usize,
    peak: f64,
    out: *mut f64,
) -> VdtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 || !(peak > 0.0) {
            return Err(invalid("psnr needs a non-empty input and a positive peak"));
        }
        *out = psnr(
            slice(pred, len, "pred")?,
            slice(target, len, "target")?,
            peak,
        );
        Ok(())
    })
}

/// SSIM of two `3×height×width` images on their luma.
///
/// # Safety
/// `pred` and `target` must hold `3·height·width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdtr_ssim(
    pred: *const f64,
    target: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> VdtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = image_len(height, width)?;
        let a = lift(Tensor::new(
            &[3, height, width],
            slice(pred, n, "pred")?.to_vec(),
        ))?;
        let b = lift(Tensor::new(
            &[3, height, width],
            slice(target, n, "target")?.to_vec(),
        ))?;
        *out = lift(ssim(&a, &b))?;
        Ok(())
    })
}

/// Analytic and measured multiply-accumulate counts of one attention pass
/// over an `height×width×d` map. `window` is ignored for global attention.
///
/// # Safety
/// `analytic` and `measured` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vdtr_attention_cost(
    mode: VdtrAttnMode,
    height: usize,
    width: usize,
    d: usize,
    window: usize,
    analytic: *mut u64,
    measured: *mut u64,
) -> VdtrStatus {
    guard(|| {
        if analytic.is_null() || measured.is_null() {
            return Err(null("output"));
        }
        let mode = match mode {
            VdtrAttnMode::Global => AttnMode::Global,
            VdtrAttnMode::Window => AttnMode::Window,
        };
        let r = lift(attention_flop_count(AttnCostConfig {
            mode,
            height,
            width,
            d,
            window,
        }))?;
        *analytic = r.analytic_macs;
        *measured = r.measured_macs;
        Ok(())
    })
}
