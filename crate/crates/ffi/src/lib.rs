//! C ABI over the csinet library.
//!
//! Every fallible function returns a [`CsinetStatus`]. On failure the message
//! is kept per thread and read with [`csinet_last_error`]. Handles are opaque
//! and released with their `_free` function; passing NULL to a free function
//! is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use csinet::cdad::make_dilation_spec;
use csinet::checkpoint::load_checkpoint;
use csinet::config::{validate_config, Config};
use csinet::data::{Mask, Raster};
use csinet::harness::predict_image;
use csinet::model::CsiNet;
use csinet::text::Vocab;
use csinet::Error;

/// Result codes. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsinetStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Io = 3,
    NonFinite = 4,
    NotImplemented = 5,
    NullPointer = 6,
    InvalidArgument = 7,
    Dimension = 8,
    Panic = 9,
}

/// Opaque configuration handle.
pub struct CsinetConfig {
    inner: Config,
}

/// Opaque model handle.
pub struct CsinetModel {
    config: Config,
    net: CsiNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CsinetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => CsinetStatus::Config,
            Error::Io { .. } | Error::Format { .. } => CsinetStatus::Io,
            Error::NonFinite(_) => CsinetStatus::NonFinite,
            Error::NotImplemented(_) => CsinetStatus::NotImplemented,
            Error::Dimension(_) => CsinetStatus::Dimension,
            Error::Tokenize(_) => CsinetStatus::InvalidArgument,
            _ => CsinetStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CsinetStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CsinetStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsinetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CsinetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CsinetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread, or NULL after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn csinet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csinet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn csinet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// New configuration from a preset: `default`, `small`, `tiny` or `toy`.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_config_new(
    preset: *const c_char,
    out: *mut *mut CsinetConfig,
) -> CsinetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let inner = Config::preset(str_arg(preset, "preset")?)?;
        *out = Box::into_raw(Box::new(CsinetConfig { inner }));
        Ok(())
    })
}

/// Set one `key = value` setting.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn csinet_config_set(
    config: *mut CsinetConfig,
    key: *const c_char,
    value: *const c_char,
) -> CsinetStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        c.inner
            .set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// `CSINET_STATUS_CONFIG` with every violation in the message, or OK.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn csinet_config_validate(config: *const CsinetConfig) -> CsinetStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let v = validate_config(&c.inner);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v).into())
        }
    })
}

/// Settings as `key = value` lines; free with `csinet_string_free`.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_config_to_text(
    config: *const CsinetConfig,
    out: *mut *mut c_char,
) -> CsinetStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let out = out_ptr(out, "out")?;
        *out = CString::new(c.inner.to_text())
            .expect("config text has no NUL")
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a live handle, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn csinet_config_free(config: *mut CsinetConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Freshly initialized model for a configuration.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_new(
    config: *const CsinetConfig,
    out: *mut *mut CsinetModel,
) -> CsinetStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let out = out_ptr(out, "out")?;
        let v = validate_config(&c.inner);
        if !v.is_empty() {
            return Err(Error::Config(v).into());
        }
        let net = CsiNet::new(&c.inner.model, candle_core::DType::F32)?;
        *out = Box::into_raw(Box::new(CsinetModel {
            config: c.inner.clone(),
            net,
        }));
        Ok(())
    })
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_load(
    path: *const c_char,
    out: *mut *mut CsinetModel,
) -> CsinetStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = load_checkpoint(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CsinetModel {
            config: ck.config,
            net: ck.net,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a live handle, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_free(model: *mut CsinetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_param_count(
    model: *const CsinetModel,
    out: *mut u64,
) -> CsinetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = m.net.count_params() as u64;
        Ok(())
    })
}

/// Side of the masks produced by `csinet_model_predict`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_mask_side(
    model: *const CsinetModel,
    out: *mut u32,
) -> CsinetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = m.net.cfg.full_side() as u32;
        Ok(())
    })
}

/// Segment the object described by `expression`.
///
/// `rgb` holds `height * width * 3` values in `[0, 1]`, row-major, channels
/// last. `mask` receives `side * side` bytes of 0 or 1, where `side` is given
/// by `csinet_model_mask_side`. A negative `threshold` uses the model's own.
///
/// # Safety
/// `rgb` must hold `height * width * 3` floats and `mask` `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn csinet_model_predict(
    model: *const CsinetModel,
    rgb: *const f32,
    height: u32,
    width: u32,
    expression: *const c_char,
    threshold: f32,
    mask: *mut u8,
    mask_len: usize,
) -> CsinetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if mask.is_null() {
            return Err(null("mask"));
        }
        let (h, w) = (height as usize, width as usize);
        if h == 0 || w == 0 {
            return Err(invalid("image must be nonempty"));
        }
        let side = m.net.cfg.full_side();
        if mask_len < side * side {
            return Err(invalid(format!(
                "mask buffer holds {mask_len} bytes, need {}",
                side * side
            )));
        }
        let pixels = std::slice::from_raw_parts(rgb, h * w * 3).to_vec();
        let image = Raster::from_vec(h, w, 3, pixels)?;
        let t = if threshold < 0.0 {
            m.config.train.threshold
        } else {
            f64::from(threshold)
        };
        let expr = str_arg(expression, "expression")?;
        let out: Mask = predict_image(&m.net, &image, expr, &Vocab::builtin(), t)?;
        std::slice::from_raw_parts_mut(mask, side * side).copy_from_slice(&out.data);
        Ok(())
    })
}

/// Intersection, union and IoU of two binary masks of `len` bytes (nonzero is
/// foreground). Two empty masks score 1.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes; outputs may be NULL to skip them.
#[no_mangle]
pub unsafe extern "C" fn csinet_iou(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    intersection: *mut u64,
    union_: *mut u64,
    iou: *mut f64,
) -> CsinetStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() {
            return Err(null("mask"));
        }
        let p = Mask::from_vec(1, len, 1, std::slice::from_raw_parts(pred, len).to_vec())?;
        let g = Mask::from_vec(1, len, 1, std::slice::from_raw_parts(gt, len).to_vec())?;
        let r = csinet::metrics::iou("ffi", &p, &g)?;
        if let Some(o) = intersection.as_mut() {
            *o = r.intersection;
        }
        if let Some(o) = union_.as_mut() {
            *o = r.union;
        }
        if let Some(o) = iou.as_mut() {
            *o = r.iou;
        }
        Ok(())
    })
}

/// Dilation offsets for a stage-4 side `h4`, slice size and density. Writes
/// `density` offsets to `offsets` (capacity `cap`) and the adjusted side to
/// `h_adjust` when non-NULL.
///
/// # Safety
/// `offsets` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn csinet_dilation_offsets(
    h4: u32,
    slice_size: u32,
    density: u32,
    offsets: *mut u32,
    cap: usize,
    h_adjust: *mut u32,
) -> CsinetStatus {
    guard(|| {
        if h4 == 0 || slice_size == 0 || density == 0 {
            return Err(invalid("h4, slice_size and density must be >= 1"));
        }
        if density > 16 {
            return Err(invalid("density must be <= 16"));
        }
        if offsets.is_null() {
            return Err(null("offsets"));
        }
        if cap < density as usize {
            return Err(invalid(format!(
                "offsets buffer holds {cap}, need {density}"
            )));
        }
        let d = make_dilation_spec(h4 as usize, slice_size as usize, density as usize);
        let dst = std::slice::from_raw_parts_mut(offsets, d.offsets.len());
        for (o, &v) in dst.iter_mut().zip(&d.offsets) {
            *o = v as u32;
        }
        if let Some(h) = h_adjust.as_mut() {
            *h = d.h_adjust as u32;
        }
        Ok(())
    })
}
