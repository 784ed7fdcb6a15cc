//! C ABI for trained models.
//!
//! The surface is a loaded-checkpoint handle plus the three one-shot task
//! operations and the image quality metrics. Handles are opaque; every
//! function returns an [`SkStatus`] code and the per-thread message from
//! [`sk_last_error_message`] carries the detail. Image buffers are 8-bit
//! interleaved RGB, row-major, `side * side * 3` bytes, where `side` comes
//! from [`sk_model_side`].
//!
//! The header `include/stegokey.h` is generated at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;

use stegokey::backbone::{purify_batch, run_with_key, ImagePlane, ModelState};
use stegokey::data_io::load_checkpoint;
use stegokey::evaluation;

/// Result codes. Non-zero means failure; call `sk_last_error_message`.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    InternalError = 5,
}

/// Opaque model handle (a loaded checkpoint).
pub struct SkModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_for(err: &stegokey::Error) -> SkStatus {
    use stegokey::Error::*;
    match err {
        Io(_) => SkStatus::IoError,
        Checkpoint(_) | CheckpointVersion { .. } | Image(_) => SkStatus::FormatError,
        Parameter(_) | Shape(_) | Config(_) | KeyIndex { .. } | Arity { .. } | Dataset(_) => {
            SkStatus::InvalidArgument
        }
        NonFiniteLoss { .. } => SkStatus::InternalError,
    }
}

fn fail(err: &stegokey::Error) -> SkStatus {
    set_error(err.to_string());
    status_for(err)
}

/// Copies the calling thread's last error message (NUL-terminated) into
/// `buf` and returns the full message length in bytes (excluding the NUL).
/// A zero-length message means the last call succeeded.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null (then only
/// the length is returned).
#[no_mangle]
pub unsafe extern "C" fn sk_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint file into a model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
/// The returned handle must be released with [`sk_model_free`].
#[no_mangle]
pub unsafe extern "C" fn sk_model_load(path: *const c_char, out: *mut *mut SkModel) -> SkStatus {
    if path.is_null() || out.is_null() {
        set_error("null path or out pointer");
        return SkStatus::NullArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error("path is not valid UTF-8");
        return SkStatus::InvalidArgument;
    };
    match load_checkpoint(Path::new(path)).and_then(|ck| ck.to_model()) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(SkModel { state }));
            set_error("");
            SkStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Releases a handle returned by [`sk_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer from `sk_model_load` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sk_model_free(model: *mut SkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square image side the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sk_model_side(model: *const SkModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).state.backbone().config().side
}

unsafe fn plane_from_raw(ptr: *const u8, side: usize) -> Option<ImagePlane> {
    if ptr.is_null() {
        return None;
    }
    let bytes = std::slice::from_raw_parts(ptr, side * side * 3);
    ImagePlane::from_rgb8(bytes, side, side).ok()
}

unsafe fn write_plane(plane: &ImagePlane, out: *mut u8) {
    let bytes = plane.to_rgb8();
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
}

/// Embeds `secret` into `cover` under `key`, writing the stego image.
/// All buffers are `side * side * 3` RGB bytes.
///
/// # Safety
/// Buffers must be valid for `side * side * 3` bytes, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_embed(
    model: *const SkModel,
    key: u64,
    secret: *const u8,
    cover: *const u8,
    out: *mut u8,
) -> SkStatus {
    if model.is_null() || secret.is_null() || cover.is_null() || out.is_null() {
        set_error("null argument");
        return SkStatus::NullArgument;
    }
    let side = (*model).state.backbone().config().side;
    let (Some(secret), Some(cover)) = (plane_from_raw(secret, side), plane_from_raw(cover, side))
    else {
        set_error("could not read input image buffers");
        return SkStatus::InvalidArgument;
    };
    match run_with_key(&(*model).state, key, Some((&secret, &cover)), None) {
        Ok(stego) => {
            write_plane(&stego, out);
            set_error("");
            SkStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Recovers a secret from a stego image under `key`.
///
/// # Safety
/// Buffers must be valid for `side * side * 3` bytes, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_recover(
    model: *const SkModel,
    key: u64,
    stego: *const u8,
    out: *mut u8,
) -> SkStatus {
    if model.is_null() || stego.is_null() || out.is_null() {
        set_error("null argument");
        return SkStatus::NullArgument;
    }
    let side = (*model).state.backbone().config().side;
    let Some(stego) = plane_from_raw(stego, side) else {
        set_error("could not read stego buffer");
        return SkStatus::InvalidArgument;
    };
    match run_with_key(&(*model).state, key, None, Some(&stego)) {
        Ok(rec) => {
            write_plane(&rec, out);
            set_error("");
            SkStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Runs the purification (denoising) task. No key involved.
///
/// # Safety
/// Buffers must be valid for `side * side * 3` bytes, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sk_purify(
    model: *const SkModel,
    noisy: *const u8,
    out: *mut u8,
) -> SkStatus {
    if model.is_null() || noisy.is_null() || out.is_null() {
        set_error("null argument");
        return SkStatus::NullArgument;
    }
    let side = (*model).state.backbone().config().side;
    let Some(noisy) = plane_from_raw(noisy, side) else {
        set_error("could not read noisy buffer");
        return SkStatus::InvalidArgument;
    };
    match purify_batch(&(*model).state, &[&noisy]) {
        Ok(mut v) => {
            write_plane(&v.remove(0), out);
            set_error("");
            SkStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

unsafe fn metric_pair(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
) -> Option<(ImagePlane, ImagePlane)> {
    if a.is_null() || b.is_null() || width == 0 || height == 0 {
        return None;
    }
    let abytes = std::slice::from_raw_parts(a, width * height * 3);
    let bbytes = std::slice::from_raw_parts(b, width * height * 3);
    Some((
        ImagePlane::from_rgb8(abytes, width, height).ok()?,
        ImagePlane::from_rgb8(bbytes, width, height).ok()?,
    ))
}

macro_rules! metric_fn {
    ($(#[$doc:meta])* $name:ident, $metric:path) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `a` and `b` must hold `width * height * 3` bytes; `out` must be
        /// a valid pointer.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            a: *const u8,
            b: *const u8,
            width: usize,
            height: usize,
            out: *mut f64,
        ) -> SkStatus {
            if out.is_null() {
                set_error("null out pointer");
                return SkStatus::NullArgument;
            }
            let Some((pa, pb)) = metric_pair(a, b, width, height) else {
                set_error("could not read metric input buffers");
                return SkStatus::InvalidArgument;
            };
            match $metric(&pa, &pb) {
                Ok(v) => {
                    *out = v;
                    set_error("");
                    SkStatus::Ok
                }
                Err(e) => fail(&e),
            }
        }
    };
}

metric_fn!(
    /// PSNR in dB between two RGB images (peak 1.0, capped at 100 dB).
    sk_psnr,
    evaluation::psnr
);
metric_fn!(
    /// Single-scale SSIM between two RGB images (11x11 Gaussian window).
    sk_ssim,
    evaluation::ssim
);
metric_fn!(
    /// Mean absolute error between two RGB images.
    sk_mae,
    evaluation::mae
);
