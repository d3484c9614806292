//! C ABI over ogan-lab: load trained swap models and attack generators,
//! run swaps, perturbations and PGD, and compute temporal scores.
//!
//! Every function returns an [`OganStatus`]; on failure a message is kept
//! per thread and can be read with [`ogan_last_error`]. Images are packed
//! N×R×R×3 f32 arrays in [0, 1]. Handles are opaque and must be released
//! with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ogan_lab::attacks::{pgd_distort, AdvGenerator, PgdConfig};
use ogan_lab::diffengine::{SeededRng, Tensor};
use ogan_lab::faceswap::SwapModel;
use ogan_lab::metrics::{e_tmp, TemporalReport};
use ogan_lab::transforms::AffineDistortion;
use ogan_lab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    Panic = 6,
}

/// A loaded face-swap model.
pub struct OganSwapModel(SwapModel);

/// A loaded perturbation generator.
pub struct OganGenerator(AdvGenerator);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> OganStatus {
    match e {
        Error::Io { .. } => OganStatus::Io,
        Error::Format { .. } | Error::Json(_) => OganStatus::Format,
        Error::NonFinite(_) => OganStatus::NonFinite,
        _ => OganStatus::InvalidArgument,
    }
}

fn fail(status: OganStatus, msg: &str) -> OganStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (OganStatus, String)>) -> OganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OganStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, &m),
        Err(_) => fail(OganStatus::Panic, "internal panic"),
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (OganStatus, String)>;
}

impl<T> IntoFfi<T> for ogan_lab::Result<T> {
    fn ffi(self) -> Result<T, (OganStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (OganStatus, String) {
    (OganStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (OganStatus, String) {
    (OganStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (OganStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn slice_arg<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], (OganStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn batch_arg(p: *const f32, n: usize, res: usize, what: &str) -> Result<Tensor, (OganStatus, String)> {
    if n == 0 {
        return Err(invalid(format!("{what}: empty batch")));
    }
    let data = slice_arg(p, n * res * res * 3, what)?;
    Tensor::new(vec![n, res, res, 3], data.to_vec()).ffi()
}

unsafe fn write_out(out: *mut f32, t: &Tensor) -> Result<(), (OganStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(t.data().as_ptr(), out, t.len());
    Ok(())
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ogan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model checkpoint given its stem (without `.json`/`.bin`).
///
/// # Safety
/// `stem` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ogan_swap_model_load(stem: *const c_char, out: *mut *mut OganSwapModel) -> OganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = SwapModel::load(path_arg(stem)?).ffi()?;
        *out = Box::into_raw(Box::new(OganSwapModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ogan_swap_model_load`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn ogan_swap_model_free(model: *mut OganSwapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ogan_swap_model_resolution(model: *const OganSwapModel, out: *mut usize) -> OganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.0.resolution();
        Ok(())
    })
}

/// The deepfake H(x) of `n` frames into `out` (same size as `frames`).
///
/// # Safety
/// `frames` and `out` must hold n×R×R×3 floats.
#[no_mangle]
pub unsafe extern "C" fn ogan_swap_model_swap(
    model: *const OganSwapModel,
    frames: *const f32,
    n: usize,
    out: *mut f32,
) -> OganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = batch_arg(frames, n, m.0.resolution(), "frames")?;
        write_out(out, &m.0.swap(&x).ffi()?)
    })
}

/// # Safety
/// `stem` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ogan_generator_load(stem: *const c_char, out: *mut *mut OganGenerator) -> OganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = AdvGenerator::load(path_arg(stem)?).ffi()?;
        *out = Box::into_raw(Box::new(OganGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `generator` must come from [`ogan_generator_load`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn ogan_generator_free(generator: *mut OganGenerator) {
    if !generator.is_null() {
        drop(Box::from_raw(generator));
    }
}

/// G(x, N) for `n` frames; `distortions` holds (theta, shift_x, shift_y)
/// per frame.
///
/// # Safety
/// `frames` and `out` must hold n×R×R×3 floats, `distortions` 3n floats.
#[no_mangle]
pub unsafe extern "C" fn ogan_generator_perturb(
    generator: *const OganGenerator,
    frames: *const f32,
    n: usize,
    distortions: *const f32,
    out: *mut f32,
) -> OganStatus {
    guard(|| {
        let g = generator.as_ref().ok_or_else(|| null("generator"))?;
        let x = batch_arg(frames, n, g.0.resolution(), "frames")?;
        let ds: Vec<AffineDistortion> = slice_arg(distortions, 3 * n, "distortions")?
            .chunks(3)
            .map(|c| AffineDistortion::new(c[0], c[1], c[2]))
            .collect();
        write_out(out, &g.0.perturb(&x, &ds).ffi()?)
    })
}

/// PGD distorting attack against `model`, one ε-bounded result per frame.
///
/// # Safety
/// `frames` and `out` must hold n×R×R×3 floats.
#[no_mangle]
pub unsafe extern "C" fn ogan_pgd_distort(
    model: *const OganSwapModel,
    frames: *const f32,
    n: usize,
    epsilon: f32,
    alpha: f32,
    iterations: usize,
    seed: u64,
    out: *mut f32,
) -> OganStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = batch_arg(frames, n, m.0.resolution(), "frames")?;
        let cfg = PgdConfig {
            epsilon,
            alpha,
            iterations,
            seed,
            ..PgdConfig::default()
        };
        let mut rng = SeededRng::new(seed);
        write_out(out, &pgd_distort(&m.0, &x, &cfg, &mut rng).ffi()?)
    })
}

fn finite(v: f64) -> Result<f64, (OganStatus, String)> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err((OganStatus::NonFinite, format!("score is {v}")))
    }
}

unsafe fn frames_arg(p: *const f32, n_frames: usize, frame_len: usize) -> Result<Vec<Tensor>, (OganStatus, String)> {
    if frame_len == 0 {
        return Err(invalid("frame_len must be positive"));
    }
    slice_arg(p, n_frames * frame_len, "frames")?
        .chunks(frame_len)
        .map(|c| Tensor::new(vec![frame_len], c.to_vec()).ffi())
        .collect()
}

/// E_tmp of `n_frames` consecutive frames of `frame_len` floats each.
///
/// # Safety
/// `frames` must hold n_frames×frame_len floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ogan_e_tmp(frames: *const f32, n_frames: usize, frame_len: usize, out: *mut f64) -> OganStatus {
    guard(|| {
        let fs = frames_arg(frames, n_frames, frame_len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = finite(e_tmp(&fs).ffi()?)?;
        Ok(())
    })
}

/// S_tmp of an attacked sequence against its baseline; both hold
/// n_frames×frame_len floats.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ogan_s_tmp(
    attacked: *const f32,
    baseline: *const f32,
    n_frames: usize,
    frame_len: usize,
    out: *mut f64,
) -> OganStatus {
    guard(|| {
        let a = frames_arg(attacked, n_frames, frame_len)?;
        let b = frames_arg(baseline, n_frames, frame_len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = finite(TemporalReport::from_frames(&a, &b).ffi()?.s_tmp)?;
        Ok(())
    })
}
