//! C ABI over `micrometric`.
//!
//! Images and calibrations cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns an [`MmStatus`]; on failure the message is kept per thread and can
//! be read with [`mm_last_error_message`]. Output pointers are written only
//! on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use micrometric::multiscale::micro_ms3im;
use micrometric::{
    calibrate_with, load_image, micro_ssim, ms_ssim, mssim, save_image, CalibrationOptions, DataRange,
    DatasetCalibration, Error, Image, ImageFormat, MetricConfig, MsSsimConfig, SsimBreakdown, Window,
};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidState = 3,
    UndefinedClosedForm = 4,
    Numeric = 5,
    FormatUnsupported = 6,
    Parse = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmWindow {
    Gaussian11 = 0,
    Uniform7 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmRange {
    /// Range of the ground-truth image being scored.
    GtImage = 0,
    /// Range over all ground truth of the dataset (calibration only).
    GtDataset = 1,
    /// `2^bits − 1` with `bits` taken from `range_value`.
    Dtype = 2,
    /// `range_value` itself.
    Explicit = 3,
}

/// Metric settings. Obtain defaults with [`mm_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MmConfig {
    pub window: MmWindow,
    pub k1: f64,
    pub k2: f64,
    pub range: MmRange,
    pub range_value: f64,
}

/// Mean SSIM and its mean components.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmScore {
    pub value: f64,
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmCalibrationParams {
    pub beta_gt: f64,
    pub beta_pred: f64,
    pub max_gt: f64,
    pub alpha: f64,
    pub fitted: bool,
}

/// Opaque image handle.
pub struct MmImage(Image);

/// Opaque calibration handle.
pub struct MmCalibration(DatasetCalibration);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(MmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) => MmStatus::InvalidArgument,
            Error::InvalidState(_) => MmStatus::InvalidState,
            Error::UndefinedClosedForm(_) => MmStatus::UndefinedClosedForm,
            Error::Numeric(_) => MmStatus::Numeric,
            Error::FormatUnsupported { .. } => MmStatus::FormatUnsupported,
            Error::Parse { .. } => MmStatus::Parse,
            Error::Io { .. } => MmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(MmStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            MmStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MmStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn metric_config(c: &MmConfig) -> Result<MetricConfig, Failure> {
    let window = match c.window {
        MmWindow::Gaussian11 => Window::gaussian11(),
        MmWindow::Uniform7 => Window::uniform7(),
    };
    let data_range = match c.range {
        MmRange::GtImage => DataRange::GtImageRange,
        MmRange::GtDataset => DataRange::GtDatasetRange,
        MmRange::Explicit => DataRange::Explicit(c.range_value),
        MmRange::Dtype => {
            let v = c.range_value;
            if !((1.0..=32.0).contains(&v) && v.fract() == 0.0) {
                return Err(Failure(MmStatus::InvalidArgument, format!("bit depth {v} is not an integer in 1..=32")));
            }
            DataRange::Dtype(v as u8)
        }
    };
    let cfg = MetricConfig {
        window,
        k1: c.k1,
        k2: c.k2,
        data_range,
        ..MetricConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn score(b: &SsimBreakdown) -> MmScore {
    MmScore {
        value: b.mssim,
        luminance: b.mean_luminance(),
        contrast: b.mean_contrast(),
        structure: b.mean_structure(),
    }
}

/// Writes the default settings: 11×11 Gaussian window, k1 = 0.01,
/// k2 = 0.03, ground-truth image range.
///
/// # Safety
/// `out` must be null or point to writable memory for one `MmConfig`.
#[no_mangle]
pub unsafe extern "C" fn mm_config_default(out: *mut MmConfig) -> MmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = MmConfig {
            window: MmWindow::Gaussian11,
            k1: 0.01,
            k2: 0.03,
            range: MmRange::GtImage,
            range_value: 0.0,
        };
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, without the
/// terminating NUL. Zero after a successful call.
#[no_mangle]
pub extern "C" fn mm_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` as a NUL-terminated string,
/// truncating to `cap − 1` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn mm_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an image from `height × width` row-major pixels. `bit_depth`
/// of zero means unknown.
///
/// # Safety
/// `pixels` must be valid for `height * width` reads and `out` for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn mm_image_new(
    height: usize,
    width: usize,
    pixels: *const f64,
    bit_depth: u8,
    out: *mut *mut MmImage,
) -> MmStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Failure(MmStatus::InvalidArgument, "image size overflows".into()))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let mut img = Image::new(height, width, data)?;
        if bit_depth > 0 {
            img = img.with_bit_depth(bit_depth);
        }
        *out = Box::into_raw(Box::new(MmImage(img)));
        Ok(())
    })
}

/// Loads a PGM, MFR1 or single-page grayscale TIFF file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn mm_image_load(path: *const c_char, out: *mut *mut MmImage) -> MmStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(MmImage(load_image(path)?)));
        Ok(())
    })
}

/// Saves an image in the format named by the path's extension.
///
/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mm_image_save(img: *const MmImage, path: *const c_char) -> MmStatus {
    guard(|| {
        let img = deref(img, "image")?;
        let path = path_arg(path)?;
        let format = ImageFormat::from_extension(path).ok_or_else(|| {
            Failure(MmStatus::FormatUnsupported, format!("{}: unknown image extension", path.display()))
        })?;
        save_image(&img.0, path, format)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be a live handle; `height` and `width` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mm_image_dims(img: *const MmImage, height: *mut usize, width: *mut usize) -> MmStatus {
    guard(|| {
        let img = deref(img, "image")?;
        let (h, w) = img.0.dims();
        if let Some(p) = height.as_mut() {
            *p = h;
        }
        if let Some(p) = width.as_mut() {
            *p = w;
        }
        Ok(())
    })
}

/// Copies the pixels into `buf`, which must hold `height * width` values.
///
/// # Safety
/// `img` must be a live handle and `buf` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn mm_image_pixels(img: *const MmImage, buf: *mut f64, cap: usize) -> MmStatus {
    guard(|| {
        let img = deref(img, "image")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let px = img.0.pixels();
        if cap < px.len() {
            return Err(Failure(
                MmStatus::BufferTooSmall,
                format!("buffer holds {cap} values, image has {}", px.len()),
            ));
        }
        ptr::copy_nonoverlapping(px.as_ptr(), buf, px.len());
        Ok(())
    })
}

/// Releases an image. Null is ignored.
///
/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mm_image_free(img: *mut MmImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Plain SSIM of `pred` against `gt`.
///
/// # Safety
/// Handles must be live; `config` and `out` must point to valid structs.
#[no_mangle]
pub unsafe extern "C" fn mm_ssim(
    gt: *const MmImage,
    pred: *const MmImage,
    config: *const MmConfig,
    out: *mut MmScore,
) -> MmStatus {
    guard(|| {
        let cfg = metric_config(deref(config, "config")?)?;
        let b = mssim(&deref(gt, "gt")?.0, &deref(pred, "pred")?.0, &cfg)?;
        *out.as_mut().ok_or_else(|| null("out"))? = score(&b);
        Ok(())
    })
}

/// Five-level MS-SSIM with the default level weights.
///
/// # Safety
/// Handles must be live; `config` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mm_ms_ssim(
    gt: *const MmImage,
    pred: *const MmImage,
    config: *const MmConfig,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        let cfg = MsSsimConfig::with_base(metric_config(deref(config, "config")?)?);
        let v = ms_ssim(&deref(gt, "gt")?.0, &deref(pred, "pred")?.0, &cfg)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Fits a dataset calibration on `n` matched pairs.
///
/// # Safety
/// `gts` and `preds` must each be valid for `n` reads of live handles;
/// `config` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_calibrate(
    gts: *const *const MmImage,
    preds: *const *const MmImage,
    n: usize,
    config: *const MmConfig,
    percentile: f64,
    out: *mut *mut MmCalibration,
) -> MmStatus {
    guard(|| {
        let cfg = metric_config(deref(config, "config")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n > 0 && (gts.is_null() || preds.is_null()) {
            return Err(null("image array"));
        }
        let collect = |arr: *const *const MmImage, what: &str| -> Result<Vec<&Image>, Failure> {
            (0..n).map(|i| Ok(&deref(*arr.add(i), what)?.0)).collect()
        };
        let (g, p) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            (collect(gts, "gt image")?, collect(preds, "pred image")?)
        };
        let options = CalibrationOptions {
            percentile,
            ..Default::default()
        };
        let fitted = calibrate_with(g, p, &cfg, &options)?;
        *out = Box::into_raw(Box::new(MmCalibration(fitted.calibration)));
        Ok(())
    })
}

/// Parses a calibration file's text.
///
/// # Safety
/// `text` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_calibration_from_text(text: *const c_char, out: *mut *mut MmCalibration) -> MmStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| Failure(MmStatus::InvalidArgument, "calibration text is not valid UTF-8".into()))?;
        *out = Box::into_raw(Box::new(MmCalibration(DatasetCalibration::from_text(s)?)));
        Ok(())
    })
}

/// Serializes a calibration. `*needed` receives the text length plus one
/// for the NUL; when `cap` is smaller, nothing is copied and
/// `MM_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `cal` must be live, `buf` null or valid for `cap` bytes, `needed` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mm_calibration_to_text(
    cal: *const MmCalibration,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MmStatus {
    guard(|| {
        let text = deref(cal, "calibration")?.0.to_text();
        let need = text.len() + 1;
        if let Some(p) = needed.as_mut() {
            *p = need;
        }
        if buf.is_null() || cap < need {
            return Err(Failure(MmStatus::BufferTooSmall, format!("calibration text needs {need} bytes")));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cal` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_calibration_params(cal: *const MmCalibration, out: *mut MmCalibrationParams) -> MmStatus {
    guard(|| {
        let c = &deref(cal, "calibration")?.0;
        *out.as_mut().ok_or_else(|| null("out"))? = MmCalibrationParams {
            beta_gt: c.beta_gt(),
            beta_pred: c.beta_pred(),
            max_gt: c.max_gt(),
            alpha: c.alpha(),
            fitted: c.is_fitted(),
        };
        Ok(())
    })
}

/// Releases a calibration. Null is ignored.
///
/// # Safety
/// `cal` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mm_calibration_free(cal: *mut MmCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// MicroSSIM under the calibration's own metric settings.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_micro_ssim(
    gt: *const MmImage,
    pred: *const MmImage,
    cal: *const MmCalibration,
    out: *mut MmScore,
) -> MmStatus {
    guard(|| {
        let c = &deref(cal, "calibration")?.0;
        let b = micro_ssim(&deref(gt, "gt")?.0, &deref(pred, "pred")?.0, c, c.config())?;
        *out.as_mut().ok_or_else(|| null("out"))? = score(&b);
        Ok(())
    })
}

/// MicroMS3IM with the default pyramid over the calibration's settings.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_micro_ms3im(
    gt: *const MmImage,
    pred: *const MmImage,
    cal: *const MmCalibration,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        let c = &deref(cal, "calibration")?.0;
        let cfg = MsSsimConfig::with_base(c.config().clone());
        let v = micro_ms3im(&deref(gt, "gt")?.0, &deref(pred, "pred")?.0, c, &cfg)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
