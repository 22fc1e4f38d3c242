//! C ABI for loading a trained enhancer and running it on RGB images.
//!
//! Images cross the boundary as planar `f64` buffers of length `3 * height * width`
//! (all red samples, then green, then blue), values nominally in `[0, 1]`.
//! Every function returns a [`LumiqStatus`]; on failure the message is kept
//! per thread and can be read with [`lumiq_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lumiq::checkpoint::Checkpoint;
use lumiq::metrics::{psnr, ssim};
use lumiq::train::Stage2Model;
use lumiq::{Error, Tensor4};

/// Result codes. `Ok` is zero; everything else is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LumiqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Degenerate = 4,
    Incompatible = 5,
    Parse = 6,
    Corrupt = 7,
    Io = 8,
    Divergence = 9,
    Panic = 10,
}

/// A loaded stage-2 model. Opaque to C.
pub struct LumiqModel {
    model: Stage2Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LumiqStatus {
    match e {
        Error::Shape { .. } => LumiqStatus::Shape,
        Error::Argument { .. } => LumiqStatus::InvalidArgument,
        Error::Degenerate { .. } => LumiqStatus::Degenerate,
        Error::Divergence { .. } => LumiqStatus::Divergence,
        Error::Compatibility(_) => LumiqStatus::Incompatible,
        Error::Parse { .. } => LumiqStatus::Parse,
        Error::Corruption(_) => LumiqStatus::Corrupt,
        Error::Io(_) => LumiqStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LumiqStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LumiqStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            LumiqStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            LumiqStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LumiqStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

/// # Safety
/// `data` must point to `3 * height * width` readable doubles.
unsafe fn image_from(data: *const f64, height: usize, width: usize, what: &'static str) -> Result<Tensor4, Fail> {
    nonnull(data, what)?;
    let n = 3usize
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail::Arg(format!("{what}: invalid size {height}x{width}")))?;
    let v = std::slice::from_raw_parts(data, n).to_vec();
    Ok(Tensor4::new([1, 3, height, width], v)?)
}

fn load(ck: &Checkpoint, out: *mut *mut LumiqModel) -> Result<(), Fail> {
    let model = Stage2Model::from_checkpoint(ck)?;
    // SAFETY: `out` was checked non-null by the caller.
    unsafe { *out = Box::into_raw(Box::new(LumiqModel { model })) };
    Ok(())
}

/// Load a stage-2 checkpoint from a file path (UTF-8, nul-terminated).
///
/// # Safety
/// `path` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn lumiq_model_load(path: *const c_char, out: *mut *mut LumiqModel) -> LumiqStatus {
    guard(|| {
        nonnull(path, "path")?;
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        load(&Checkpoint::load(Path::new(p))?, out)
    })
}

/// Load a stage-2 checkpoint from an in-memory buffer.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lumiq_model_load_bytes(bytes: *const u8, len: usize, out: *mut *mut LumiqModel) -> LumiqStatus {
    guard(|| {
        nonnull(bytes, "bytes")?;
        nonnull(out, "out")?;
        *out = ptr::null_mut();
        let b = std::slice::from_raw_parts(bytes, len);
        load(&Checkpoint::from_bytes(b)?, out)
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lumiq_model_free(model: *mut LumiqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length images must be a multiple of.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lumiq_model_size_multiple(model: *const LumiqModel, out: *mut usize) -> LumiqStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(out, "out")?;
        *out = 1usize << (*model).model.config.n_down;
        Ok(())
    })
}

/// Enhance one low-light image. `output` receives `3 * height * width` doubles.
///
/// # Safety
/// `input` and `output` must each hold `3 * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn lumiq_enhance(
    model: *const LumiqModel,
    input: *const f64,
    height: usize,
    width: usize,
    output: *mut f64,
) -> LumiqStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(output, "output")?;
        let img = image_from(input, height, width, "input")?;
        let res = (*model).model.enhance(&img)?;
        let data = res.image.data();
        std::slice::from_raw_parts_mut(output, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// PSNR in dB between two images with peak value `max_val`.
///
/// # Safety
/// `a` and `b` must each hold `3 * height * width` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lumiq_psnr(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    max_val: f64,
    out: *mut f64,
) -> LumiqStatus {
    guard(|| {
        nonnull(out, "out")?;
        let (x, y) = (image_from(a, height, width, "a")?, image_from(b, height, width, "b")?);
        *out = psnr(&x, &y, max_val)?;
        Ok(())
    })
}

/// Mean SSIM between two images.
///
/// # Safety
/// `a` and `b` must each hold `3 * height * width` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lumiq_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> LumiqStatus {
    guard(|| {
        nonnull(out, "out")?;
        let (x, y) = (image_from(a, height, width, "a")?, image_from(b, height, width, "b")?);
        *out = ssim(&x, &y)?;
        Ok(())
    })
}

/// Message for the last failure on this thread, or null if the last call
/// succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lumiq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn lumiq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_distinct_codes() {
        let cases = [
            (Error::Compatibility("x".into()), LumiqStatus::Incompatible),
            (Error::Parse { offset: 3, msg: "m".into() }, LumiqStatus::Parse),
            (Error::Corruption("c".into()), LumiqStatus::Corrupt),
            (Error::Io(std::io::Error::other("io")), LumiqStatus::Io),
        ];
        for (e, s) in cases {
            assert_eq!(status_of(&e), s);
        }
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), LumiqStatus::Panic);
        let msg = unsafe { CStr::from_ptr(lumiq_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
        assert_eq!(guard(|| Ok(())), LumiqStatus::Ok);
        assert!(lumiq_last_error().is_null());
    }
}
