//! C ABI over the sat2street pipeline.
//!
//! Objects are opaque handles created by `*_new`/`*_open` functions and released with
//! the matching `*_free`. Every fallible call returns an [`S2sStatus`]; on failure
//! [`s2s_last_error_message`] describes the error for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sat2street::datasets::{write_synthetic, Split, SyntheticSizes};
use sat2street::pipeline::stages::{run_all, run_stage1, run_stage2, run_stage3, run_stage4};
use sat2street::pipeline::{infer, Checkpoint, Pipeline, PipelineConfig};
use sat2street::{Error, ImageTensor, ValueRange};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

impl From<&Error> for S2sStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Range(_) => S2sStatus::InvalidArgument,
            Error::Config(_) => S2sStatus::Config,
            Error::Checkpoint(_) => S2sStatus::Checkpoint,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => S2sStatus::Numerical,
            Error::Io(_) | Error::Json(_) => S2sStatus::Io,
            _ => S2sStatus::Data,
        }
    }
}

/// Pipeline configuration.
pub struct S2sConfig {
    inner: PipelineConfig,
}

/// A loaded pipeline ready for inference.
pub struct S2sPipeline {
    inner: Pipeline,
}

/// An owned image, 8-bit RGB, row-major, channels interleaved.
pub struct S2sImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Panorama outputs of one inference call.
pub struct S2sOutputs {
    images: [S2sImage; 4],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct S2sMetrics {
    pub ssim: f64,
    pub psnr: f64,
    pub fid: f64,
    pub lpips: f64,
    pub n_pairs: usize,
}

pub const S2S_OUTPUT_BRANCH1_SQUARE: u32 = 0;
pub const S2S_OUTPUT_BRANCH1_PANO: u32 = 1;
pub const S2S_OUTPUT_BRANCH2_PANO: u32 = 2;
pub const S2S_OUTPUT_FUSED: u32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

enum Failure {
    Status(S2sStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> S2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            S2sStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            S2sStatus::from(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_error(format!("internal panic: {}", msg.unwrap_or_default()));
            S2sStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(S2sStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Status(S2sStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_rgb8(img: &ImageTensor) -> S2sImage {
    let img = img.convert_range(ValueRange::Unit);
    let (c, h, w) = img.dims();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.get(ch.min(c - 1), y, x);
                pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    S2sImage { width: w, height: h, pixels }
}

/// Message for the last failed call on this thread; empty after a success. Valid until the next call.
#[no_mangle]
pub extern "C" fn s2s_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn s2s_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// New configuration with default values.
#[no_mangle]
pub extern "C" fn s2s_config_new() -> *mut S2sConfig {
    Box::into_raw(Box::new(S2sConfig { inner: PipelineConfig::default() }))
}

/// Loads a `key=value` config file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_load(path: *const c_char, out: *mut *mut S2sConfig) -> S2sStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = obj_mut(out, "out")?;
        let inner = PipelineConfig::load(path)?;
        *out = Box::into_raw(Box::new(S2sConfig { inner }));
        Ok(())
    })
}

/// Sets one dotted config key.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_set(cfg: *mut S2sConfig, key: *const c_char, value: *const c_char) -> S2sStatus {
    guard(|| {
        let cfg = obj_mut(cfg, "cfg")?;
        cfg.inner.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Checks every config constraint.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_validate(cfg: *const S2sConfig) -> S2sStatus {
    guard(|| {
        obj(cfg, "cfg")?.inner.validate()?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_free(cfg: *mut S2sConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes a procedural dataset into `dest`, or `data.root` when `dest` is null.
///
/// # Safety
/// `cfg` must come from this library; `dest` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn s2s_make_synthetic(cfg: *const S2sConfig, dest: *const c_char, train: usize, test: usize) -> S2sStatus {
    guard(|| {
        let cfg = &obj(cfg, "cfg")?.inner;
        let dest = opt_str_arg(dest, "dest")?.map_or_else(|| cfg.data_root.clone(), PathBuf::from);
        let sizes = SyntheticSizes { satellite: cfg.satellite_size, pano_height: cfg.pano_height, ..Default::default() };
        write_synthetic(dest, cfg.seed, train, test, sizes)?;
        Ok(())
    })
}

/// Trains stage 1-4 into `out_dir`; stage 0 runs all four in order.
///
/// # Safety
/// `cfg` must come from this library; `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn s2s_train(cfg: *const S2sConfig, out_dir: *const c_char, stage: u32, resume: bool) -> S2sStatus {
    guard(|| {
        let cfg = &obj(cfg, "cfg")?.inner;
        cfg.validate()?;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        match stage {
            0 => drop(run_all(cfg, &out, resume)?),
            1 => drop(run_stage1(cfg, &out, resume)?),
            2 => drop(run_stage2(cfg, &out, resume)?),
            3 => drop(run_stage3(cfg, &out, resume)?),
            4 => drop(run_stage4(cfg, &out, resume)?),
            s => return Err(Failure::Status(S2sStatus::InvalidArgument, format!("stage {s} outside 0..=4"))),
        }
        Ok(())
    })
}

/// Loads a full checkpoint. `cache_dir` may be null to disable caching of branch-1 samples.
///
/// # Safety
/// `cfg` must come from this library; string arguments must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn s2s_pipeline_open(
    cfg: *const S2sConfig,
    ckpt_path: *const c_char,
    cache_dir: *const c_char,
    out: *mut *mut S2sPipeline,
) -> S2sStatus {
    guard(|| {
        let cfg = &obj(cfg, "cfg")?.inner;
        let path = str_arg(ckpt_path, "ckpt_path")?;
        let cache = opt_str_arg(cache_dir, "cache_dir")?;
        let out = obj_mut(out, "out")?;
        let mut inner = Pipeline::from_checkpoint(cfg, &Checkpoint::load(path)?)?;
        if let Some(c) = cache {
            inner = inner.with_cache(c);
        }
        *out = Box::into_raw(Box::new(S2sPipeline { inner }));
        Ok(())
    })
}

/// # Safety
/// `pipe` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_pipeline_free(pipe: *mut S2sPipeline) {
    if !pipe.is_null() {
        drop(Box::from_raw(pipe));
    }
}

/// Runs one satellite image, given as `height * width * 3` interleaved RGB bytes.
///
/// `id` seeds the diffusion branch; `caption` null uses the configured prompt text.
///
/// # Safety
/// `pixels` must point to `height * width * 3` bytes; strings must be NUL-terminated or null where allowed.
#[no_mangle]
pub unsafe extern "C" fn s2s_pipeline_run(
    pipe: *const S2sPipeline,
    id: *const c_char,
    pixels: *const u8,
    height: usize,
    width: usize,
    caption: *const c_char,
    out: *mut *mut S2sOutputs,
) -> S2sStatus {
    guard(|| {
        let pipe = &obj(pipe, "pipe")?.inner;
        let id = str_arg(id, "id")?;
        let caption = opt_str_arg(caption, "caption")?.unwrap_or(&pipe.cfg.prompt_text);
        let out = obj_mut(out, "out")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = height.checked_mul(width).and_then(|v| v.checked_mul(3)).filter(|&n| n > 0);
        let n = n.ok_or_else(|| Failure::Status(S2sStatus::InvalidArgument, "empty or oversized image".into()))?;
        let raw = std::slice::from_raw_parts(pixels, n);
        let mut planar = vec![0.0f32; n];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                planar[c * height * width + i] = v as f32 / 255.0;
            }
        }
        let img = ImageTensor::new(3, height, width, planar, ValueRange::Unit)?;
        let o = pipe.run(id, &img, caption)?;
        let images = [to_rgb8(&o.branch1_square), to_rgb8(&o.branch1_pano), to_rgb8(&o.branch2_pano), to_rgb8(&o.fused)];
        *out = Box::into_raw(Box::new(S2sOutputs { images }));
        Ok(())
    })
}

/// Borrowed view of one output (`S2S_OUTPUT_*`); null for an unknown index. Owned by `outputs`.
///
/// # Safety
/// `outputs` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn s2s_outputs_get(outputs: *const S2sOutputs, which: u32) -> *const S2sImage {
    match outputs.as_ref() {
        Some(o) if (which as usize) < o.images.len() => &o.images[which as usize],
        _ => ptr::null(),
    }
}

/// # Safety
/// `outputs` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_outputs_free(outputs: *mut S2sOutputs) {
    if !outputs.is_null() {
        drop(Box::from_raw(outputs));
    }
}

/// # Safety
/// `img` must be a live image pointer or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn s2s_image_width(img: *const S2sImage) -> usize {
    img.as_ref().map_or(0, |i| i.width)
}

/// # Safety
/// `img` must be a live image pointer or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn s2s_image_height(img: *const S2sImage) -> usize {
    img.as_ref().map_or(0, |i| i.height)
}

/// Interleaved RGB bytes, `height * width * 3` long; null for a null image.
///
/// # Safety
/// `img` must be a live image pointer or null.
#[no_mangle]
pub unsafe extern "C" fn s2s_image_data(img: *const S2sImage) -> *const u8 {
    img.as_ref().map_or(ptr::null(), |i| i.pixels.as_ptr())
}

/// Scores a split (`"train"` or `"test"`) and writes the report files into `out_dir`.
///
/// # Safety
/// `pipe` must come from this library; strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn s2s_evaluate(
    pipe: *const S2sPipeline,
    split: *const c_char,
    out_dir: *const c_char,
    out: *mut S2sMetrics,
) -> S2sStatus {
    guard(|| {
        let pipe = &obj(pipe, "pipe")?.inner;
        let split: Split = str_arg(split, "split")?.parse()?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let out = obj_mut(out, "out")?;
        let r = infer::evaluate(&pipe.cfg, pipe, split, &dir)?;
        *out = S2sMetrics { ssim: r.ssim, psnr: r.psnr, fid: r.fid, lpips: r.lpips, n_pairs: r.n_pairs };
        Ok(())
    })
}
