//! C ABI over the `lrseg` library.
//!
//! Every function returns an [`LrsegStatus`]. On failure the message is kept
//! per thread and can be read with [`lrseg_last_error_message`]. Objects cross
//! the boundary as opaque handles that the caller releases with the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lrseg::config::PipelineConfig;
use lrseg::metrics;
use lrseg::phantom::{generate_phantom, PhantomConfig};
use lrseg::pipeline::{run_in_memory, run_pipeline};
use lrseg::video::{load_mask, load_video, save_mask, save_video, Video};
use lrseg::Error;
use ndarray::{Array1, Array3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Config = 6,
    Numeric = 7,
    Index = 8,
    Metric = 9,
    Internal = 10,
}

impl From<&Error> for LrsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => Self::Io,
            Error::Load { .. } => Self::Format,
            Error::Dimension(_) => Self::Dimension,
            Error::Config(_) => Self::Config,
            Error::Numeric(_) => Self::Numeric,
            Error::Index(_) => Self::Index,
            Error::Metric(_) => Self::Metric,
            Error::Stage { source, .. } => Self::from(source.as_ref()),
        }
    }
}

/// A video volume in `(frame, row, col)` order.
pub struct LrsegVideo(Video);

/// A binary mask volume in `(frame, row, col)` order.
pub struct LrsegMask {
    data: Array3<bool>,
    frame_rate_hz: f64,
}

/// Outcome of a pipeline run. Metric fields are meaningful only when
/// `has_metrics` is nonzero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LrsegRunSummary {
    pub roi_top: usize,
    pub roi_left: usize,
    pub roi_height: usize,
    pub roi_width: usize,
    pub has_metrics: u8,
    pub mean_i: f64,
    pub mean_iou: f64,
    pub mean_dc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(LrsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(LrsegStatus::from(&e), e.to_string())
    }
}

fn fail(status: LrsegStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LrsegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LrsegStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(LrsegStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LrsegStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(LrsegStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(LrsegStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(LrsegStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lrseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lrseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a video volume file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_load(path: *const c_char, out: *mut *mut LrsegVideo) -> LrsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let video = load_video(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(LrsegVideo(video)));
        Ok(())
    })
}

/// Writes a video volume file.
///
/// # Safety
/// `video` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_save(video: *const LrsegVideo, path: *const c_char) -> LrsegStatus {
    guard(|| {
        save_video(&ref_arg(video, "video")?.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Builds a video from `frames * height * width` samples in `(frame, row,
/// col)` order.
///
/// # Safety
/// `data` must point to that many readable doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_from_data(
    data: *const f64,
    frames: usize,
    height: usize,
    width: usize,
    frame_rate_hz: f64,
    out: *mut *mut LrsegVideo,
) -> LrsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = frames
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| fail(LrsegStatus::InvalidArgument, "volume size overflows"))?;
        let samples = slice_arg(data, len, "data")?;
        let volume = Array3::from_shape_vec((frames, height, width), samples.to_vec())
            .map_err(|e| fail(LrsegStatus::Dimension, e.to_string()))?;
        *out = Box::into_raw(Box::new(LrsegVideo(Video::new(volume, frame_rate_hz)?)));
        Ok(())
    })
}

/// # Safety
/// `video` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_dims(
    video: *const LrsegVideo,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> LrsegStatus {
    guard(|| {
        let v = &ref_arg(video, "video")?.0;
        *out_arg(frames, "frames")? = v.frames();
        *out_arg(height, "height")? = v.height();
        *out_arg(width, "width")? = v.width();
        Ok(())
    })
}

/// Copies the samples into `buf`, which must hold exactly
/// `frames * height * width` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_copy_data(video: *const LrsegVideo, buf: *mut f64, len: usize) -> LrsegStatus {
    guard(|| {
        let v = &ref_arg(video, "video")?.0;
        let data = v.data();
        if len != data.len() {
            return Err(fail(
                LrsegStatus::Dimension,
                format!("buffer holds {len} samples, video has {}", data.len()),
            ));
        }
        if buf.is_null() {
            return Err(fail(LrsegStatus::NullPointer, "`buf` is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(data.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `video` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn lrseg_video_free(video: *mut LrsegVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Loads a mask volume file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lrseg_mask_load(path: *const c_char, out: *mut *mut LrsegMask) -> LrsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = load_mask(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(LrsegMask {
            data,
            frame_rate_hz: 25.0,
        }));
        Ok(())
    })
}

/// Writes a mask volume file.
///
/// # Safety
/// `mask` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lrseg_mask_save(mask: *const LrsegMask, path: *const c_char) -> LrsegStatus {
    guard(|| {
        let m = ref_arg(mask, "mask")?;
        save_mask(&m.data, m.frame_rate_hz, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrseg_mask_dims(
    mask: *const LrsegMask,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> LrsegStatus {
    guard(|| {
        let (t, h, w) = ref_arg(mask, "mask")?.data.dim();
        *out_arg(frames, "frames")? = t;
        *out_arg(height, "height")? = h;
        *out_arg(width, "width")? = w;
        Ok(())
    })
}

/// Copies the mask as 0/1 bytes into `buf` of exactly `len` elements.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lrseg_mask_copy_data(mask: *const LrsegMask, buf: *mut u8, len: usize) -> LrsegStatus {
    guard(|| {
        let data = &ref_arg(mask, "mask")?.data;
        if len != data.len() {
            return Err(fail(
                LrsegStatus::Dimension,
                format!("buffer holds {len} voxels, mask has {}", data.len()),
            ));
        }
        if buf.is_null() {
            return Err(fail(LrsegStatus::NullPointer, "`buf` is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(data.iter()) {
            *d = u8::from(*s);
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or come from this library, and not be used after.
#[no_mangle]
pub unsafe extern "C" fn lrseg_mask_free(mask: *mut LrsegMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Generates the standard 64x64x48 phantom for `seed`. `out_truth` may be
/// null when the reference mask is not wanted.
///
/// # Safety
/// `out_video` must be valid; `out_truth` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn lrseg_phantom_generate(
    seed: u64,
    out_video: *mut *mut LrsegVideo,
    out_truth: *mut *mut LrsegMask,
) -> LrsegStatus {
    guard(|| {
        let out_video = out_arg(out_video, "out_video")?;
        let cfg = PhantomConfig::standard(seed);
        let (video, truth) = generate_phantom(&cfg)?;
        if let Some(out_truth) = out_truth.as_mut() {
            *out_truth = Box::into_raw(Box::new(LrsegMask {
                data: truth.valve_mask,
                frame_rate_hz: cfg.frame_rate_hz,
            }));
        }
        *out_video = Box::into_raw(Box::new(LrsegVideo(video)));
        Ok(())
    })
}

/// Runs the full pipeline. `config` holds `key = value` lines applied over
/// the defaults and may be null. With a non-null `out_dir` the run
/// artifacts are written there; `force` nonzero allows a non-empty
/// directory. `out_mask` may be null.
///
/// # Safety
/// String arguments must be NUL-terminated or null as allowed; `summary`
/// must be valid and `out_mask` valid or null.
#[no_mangle]
pub unsafe extern "C" fn lrseg_pipeline_run(
    config: *const c_char,
    out_dir: *const c_char,
    force: u8,
    summary: *mut LrsegRunSummary,
    out_mask: *mut *mut LrsegMask,
) -> LrsegStatus {
    guard(|| {
        let summary = out_arg(summary, "summary")?;
        let cfg = if config.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::from_text(str_arg(config, "config")?)?
        };
        let result = if out_dir.is_null() {
            run_in_memory(&cfg)?
        } else {
            run_pipeline(&cfg, Path::new(str_arg(out_dir, "out_dir")?), force != 0)?
        };
        let roi = result.detection.roi;
        *summary = LrsegRunSummary {
            roi_top: roi.top,
            roi_left: roi.left,
            roi_height: roi.height,
            roi_width: roi.width,
            ..LrsegRunSummary::default()
        };
        if let Some(r) = &result.report {
            summary.has_metrics = 1;
            summary.mean_i = r.mean_i;
            summary.mean_iou = r.mean_iou;
            summary.mean_dc = r.mean_dc;
        }
        if let Some(out_mask) = out_mask.as_mut() {
            *out_mask = Box::into_raw(Box::new(LrsegMask {
                data: result.mask.data,
                frame_rate_hz: result.video.frame_rate_hz(),
            }));
        }
        Ok(())
    })
}

type BoolMetric = fn(&Array1<bool>, &Array1<bool>) -> lrseg::Result<f64>;

unsafe fn byte_metric(m: *const u8, gs: *const u8, len: usize, out: *mut f64, f: BoolMetric) -> LrsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a: Array1<bool> = slice_arg(m, len, "m")?.iter().map(|v| *v != 0).collect();
        let b: Array1<bool> = slice_arg(gs, len, "gs")?.iter().map(|v| *v != 0).collect();
        *out = f(&a, &b)?;
        Ok(())
    })
}

/// IoU of two byte masks of `len` elements (nonzero is set).
///
/// # Safety
/// `m` and `gs` must point to `len` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lrseg_iou(m: *const u8, gs: *const u8, len: usize, out: *mut f64) -> LrsegStatus {
    byte_metric(m, gs, len, out, metrics::iou)
}

/// Dice coefficient of two byte masks of `len` elements.
///
/// # Safety
/// As for [`lrseg_iou`].
#[no_mangle]
pub unsafe extern "C" fn lrseg_dice(m: *const u8, gs: *const u8, len: usize, out: *mut f64) -> LrsegStatus {
    byte_metric(m, gs, len, out, metrics::dice)
}

/// Share of the `m` region that lies inside `gs`.
///
/// # Safety
/// As for [`lrseg_iou`].
#[no_mangle]
pub unsafe extern "C" fn lrseg_window_accuracy(m: *const u8, gs: *const u8, len: usize, out: *mut f64) -> LrsegStatus {
    byte_metric(m, gs, len, out, metrics::window_accuracy)
}
