//! C interface to the colorizer and its metrics.
//!
//! Every function returns a [`DcStatus`]. On failure the calling thread's
//! last error message is set and can be read with [`dc_last_error`].
//! Images cross the boundary as interleaved row-major float arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dualcolor::colorspace::{lab_pixel_to_srgb, lab_to_rgb, srgb_pixel_to_lab, RgbImage};
use dualcolor::fusion::Generator;
use dualcolor::metrics::{colorfulness_score, frechet_distance, psnr, EmbeddingStats};
use dualcolor::train::load_generator;
use dualcolor::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NotPositiveSemidefinite = 4,
    Io = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Internal = 8,
    Panic = 9,
}

/// A loaded colorization model.
pub struct DcModel {
    generator: Generator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Shape { .. } => DcStatus::ShapeMismatch,
        Error::NotPsd(_) => DcStatus::NotPositiveSemidefinite,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => DcStatus::NonFinite,
        Error::Io { .. } | Error::Image { .. } | Error::EmptyDataset(_) => DcStatus::Io,
        Error::Checkpoint { .. } => DcStatus::Checkpoint,
        Error::Config(_) | Error::Input(_) => DcStatus::InvalidArgument,
        Error::Tensor(_) => DcStatus::Internal,
    }
}

struct Fail(DcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DcStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(DcStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(DcStatus::InvalidArgument, "size overflow".into()))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Converts `count` sRGB triples in `[0, 1]` to `[L, a, b]` triples.
///
/// # Safety
/// `rgb` and `lab` must each point to `3 * count` floats.
#[no_mangle]
pub unsafe extern "C" fn dc_rgb_to_lab(rgb: *const f32, count: usize, lab: *mut f32) -> DcStatus {
    guard(|| {
        non_null(rgb, "rgb")?;
        non_null(lab, "lab")?;
        let n = checked_len(count, 3)?;
        let src = std::slice::from_raw_parts(rgb, n);
        let dst = std::slice::from_raw_parts_mut(lab, n);
        for (s, d) in src.chunks_exact(3).zip(dst.chunks_exact_mut(3)) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Fail(DcStatus::NonFinite, "non-finite rgb input".into()));
            }
            let out = srgb_pixel_to_lab([s[0], s[1], s[2]].map(|v| v.clamp(0.0, 1.0) as f64));
            d.copy_from_slice(&out.map(|v| v as f32));
        }
        Ok(())
    })
}

/// Converts `count` `[L, a, b]` triples to sRGB, clamped into `[0, 1]`.
///
/// # Safety
/// `lab` and `rgb` must each point to `3 * count` floats.
#[no_mangle]
pub unsafe extern "C" fn dc_lab_to_rgb(lab: *const f32, count: usize, rgb: *mut f32) -> DcStatus {
    guard(|| {
        non_null(lab, "lab")?;
        non_null(rgb, "rgb")?;
        let n = checked_len(count, 3)?;
        let src = std::slice::from_raw_parts(lab, n);
        let dst = std::slice::from_raw_parts_mut(rgb, n);
        for (s, d) in src.chunks_exact(3).zip(dst.chunks_exact_mut(3)) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Fail(DcStatus::NonFinite, "non-finite lab input".into()));
            }
            let out = lab_pixel_to_srgb([s[0] as f64, s[1] as f64, s[2] as f64]);
            d.copy_from_slice(&out.map(|v| v as f32));
        }
        Ok(())
    })
}

unsafe fn read_image(rgb: *const f32, height: usize, width: usize) -> Result<RgbImage, Fail> {
    non_null(rgb, "rgb")?;
    let n = checked_len(checked_len(height, width)?, 3)?;
    Ok(RgbImage::new(
        height,
        width,
        std::slice::from_raw_parts(rgb, n).to_vec(),
    )?)
}

/// Colorfulness score of an `height x width` RGB image in `[0, 1]`.
///
/// # Safety
/// `rgb` must point to `3 * height * width` floats; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn dc_colorfulness(rgb: *const f32, height: usize, width: usize, out: *mut f64) -> DcStatus {
    guard(|| {
        non_null(out, "out")?;
        let img = read_image(rgb, height, width)?;
        *out = colorfulness_score(&img)?;
        Ok(())
    })
}

/// PSNR in dB between two signals of `len` values; identical inputs give
/// the documented cap.
///
/// # Safety
/// `pred` and `target` must point to `len` doubles; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn dc_psnr(
    pred: *const f64,
    target: *const f64,
    len: usize,
    peak: f64,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(target, "target")?;
        non_null(out, "out")?;
        let a = std::slice::from_raw_parts(pred, len);
        let b = std::slice::from_raw_parts(target, len);
        *out = psnr(a, b, peak)?;
        Ok(())
    })
}

unsafe fn read_stats(mean: *const f64, cov: *const f64, dim: usize, count: usize) -> Result<EmbeddingStats, Fail> {
    non_null(mean, "mean")?;
    non_null(cov, "cov")?;
    let m = DVector::from_column_slice(std::slice::from_raw_parts(mean, dim));
    let c = DMatrix::from_row_slice(dim, dim, std::slice::from_raw_parts(cov, checked_len(dim, dim)?));
    Ok(EmbeddingStats::new(m, c, count)?)
}

/// Fréchet distance between two Gaussians given as means of length `dim`
/// and row-major `dim x dim` covariances.
///
/// # Safety
/// Means must point to `dim` doubles, covariances to `dim * dim` doubles
/// and `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn dc_frechet_distance(
    mean_a: *const f64,
    cov_a: *const f64,
    mean_b: *const f64,
    cov_b: *const f64,
    dim: usize,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(Fail(DcStatus::InvalidArgument, "dimension must be positive".into()));
        }
        let a = read_stats(mean_a, cov_a, dim, 2)?;
        let b = read_stats(mean_b, cov_b, dim, 2)?;
        *out = frechet_distance(&a, &b)?;
        Ok(())
    })
}

/// Loads a training checkpoint. On success `*model` owns a handle that
/// must be released with [`dc_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, model: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(model, "model")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let generator = load_generator(Path::new(path))?;
        *model = Box::into_raw(Box::new(DcModel { generator }));
        Ok(())
    })
}

/// Number of color queries, or 0 when the model has no color decoder.
///
/// # Safety
/// `model` must come from [`dc_model_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_num_queries(model: *const DcModel, out: *mut usize) -> DcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let m = &*model;
        *out = m.generator.color_decoder().map_or(0, |cd| cd.config().queries);
        Ok(())
    })
}

/// Colorizes an RGB image of any size, keeping its luminance. Color
/// inputs are reduced to luminance first.
///
/// # Safety
/// `model` must come from [`dc_model_load`]; `rgb` and `out` must each
/// point to `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn dc_model_colorize(
    model: *const DcModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> DcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let img = read_image(rgb, height, width)?;
        let result = lab_to_rgb(&(*model).generator.colorize(&img)?);
        std::slice::from_raw_parts_mut(out, result.pixels().len()).copy_from_slice(result.pixels());
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`dc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
