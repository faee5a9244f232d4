//! C ABI over the `pepnet` crate.
//!
//! Every function returns a [`PepStatus`]; on failure the message is kept in
//! a thread-local slot readable through [`pep_last_error`]. Masks cross the
//! boundary as row-major `uint8_t` planes where any non-zero byte is
//! foreground. Panics are caught and reported as `PEP_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pepnet::data::{generate_sample, Mask, SynthParams};
use pepnet::metrics;
use pepnet::net::Model;
use pepnet::rng::{stream_rng, Stream};
use pepnet::{checkpoint, Error, Tensor};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Internal = 7,
}

/// Opaque handle to a loaded model.
pub struct PepModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PepStatus {
    match e {
        Error::Shape { .. } => PepStatus::Shape,
        Error::InvalidArgument(_)
        | Error::InsufficientSamples { .. }
        | Error::Frozen
        | Error::NonScalarLoss(_) => PepStatus::InvalidArgument,
        Error::NonFinite(_) | Error::SingularCovariance { .. } | Error::Asymmetric(_) => {
            PepStatus::Numeric
        }
        Error::Format { .. } | Error::Json(_) => PepStatus::Format,
        Error::Io { .. } => PepStatus::Io,
    }
}

struct Fail(PepStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut cause = std::error::Error::source(&e);
        while let Some(c) = cause {
            msg.push_str(&format!(": {c}"));
            cause = c.source();
        }
        Fail(status_of(&e), msg)
    }
}

fn null(what: &str) -> Fail {
    Fail(PepStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PepStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PepStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PepStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PepStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn plane_len(height: usize, width: usize) -> Result<usize, Fail> {
    match height.checked_mul(width) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(invalid(format!(
            "mask size {height}x{width} is empty or overflows"
        ))),
    }
}

fn masks(bytes: &[u8], count: usize, height: usize, width: usize) -> Result<Vec<Mask>, Fail> {
    let n = height * width;
    bytes
        .chunks(n)
        .take(count)
        .map(|c| {
            Ok(Mask::new(
                height,
                width,
                c.iter().map(|&b| b != 0).collect(),
            )?)
        })
        .collect()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pep_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint directory written by `pepnet train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out_model` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pep_model_load(
    dir: *const c_char,
    out_model: *mut *mut PepModel,
) -> PepStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        if dir.is_null() {
            return Err(null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| invalid("dir is not valid UTF-8"))?;
        let model = checkpoint::load(Path::new(dir))?;
        *slot = Box::into_raw(Box::new(PepModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`pep_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from `pep_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pep_model_free(model: *mut PepModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side length, full latent dimension and retained dimension.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pep_model_dims(
    model: *const PepModel,
    image_size: *mut usize,
    latent_dim: *mut usize,
    k: *mut usize,
) -> PepStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = m.model.config();
        *out(image_size, "image_size")? = c.image_size;
        *out(latent_dim, "latent_dim")? = c.latent_dim;
        *out(k, "k")? = c.k;
        Ok(())
    })
}

/// Draws `m` foreground-probability maps for one `size × size` image in
/// `[0, 1]`, writing `m · size · size` floats to `probs_out`. Identical
/// inputs and seed give identical maps.
///
/// # Safety
/// `image` must hold `size²` floats and `probs_out` room for `m · size²`.
#[no_mangle]
pub unsafe extern "C" fn pep_model_sample(
    model: *const PepModel,
    image: *const f32,
    size: usize,
    m: usize,
    seed: u64,
    probs_out: *mut f32,
) -> PepStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let expect = model.config().image_size;
        if size != expect {
            return Err(invalid(format!(
                "model expects {expect}x{expect} images, got {size}x{size}"
            )));
        }
        if m == 0 {
            return Err(invalid("m must be at least 1"));
        }
        let n = plane_len(size, size)?;
        let pixels = slice(image, n, "image")?;
        let total = n
            .checked_mul(m)
            .ok_or_else(|| invalid("m · size² overflows"))?;
        let dst = slice_mut(probs_out, total, "probs_out")?;
        let tensor = Tensor::new(vec![1, 1, size, size], pixels.to_vec())?;
        let mut rng = stream_rng(seed, Stream::Eval, 0);
        let maps = metrics::probability_maps(model, &tensor, m, &mut rng)?;
        for (chunk, map) in dst.chunks_mut(n).zip(&maps) {
            chunk.copy_from_slice(map);
        }
        Ok(())
    })
}

/// Intersection over union of two masks; two empty masks score 1.
///
/// # Safety
/// `a` and `b` must each hold `height · width` bytes; `out_iou` writable.
#[no_mangle]
pub unsafe extern "C" fn pep_iou(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out_iou: *mut f64,
) -> PepStatus {
    guard(|| {
        let n = plane_len(height, width)?;
        let a = masks(slice(a, n, "a")?, 1, height, width)?;
        let b = masks(slice(b, n, "b")?, 1, height, width)?;
        *out(out_iou, "out_iou")? = metrics::iou(&a[0], &b[0])?;
        Ok(())
    })
}

/// Generalized energy distance between `m` predicted masks and `r` rater
/// masks, with distance `1 − IoU`.
///
/// # Safety
/// `preds` must hold `m · height · width` bytes, `raters` `r · height · width`.
#[no_mangle]
pub unsafe extern "C" fn pep_ged(
    preds: *const u8,
    m: usize,
    raters: *const u8,
    r: usize,
    height: usize,
    width: usize,
    out_ged: *mut f64,
) -> PepStatus {
    guard(|| {
        if m == 0 || r == 0 {
            return Err(invalid("need at least one prediction and one rater mask"));
        }
        let n = plane_len(height, width)?;
        let len = |c: usize| {
            n.checked_mul(c)
                .ok_or_else(|| invalid("mask stack size overflows"))
        };
        let p = masks(slice(preds, len(m)?, "preds")?, m, height, width)?;
        let y = masks(slice(raters, len(r)?, "raters")?, r, height, width)?;
        *out(out_ged, "out_ged")? = metrics::ged(&p, &y)?;
        Ok(())
    })
}

/// Synthetic generator settings, mirroring `pepnet generate-data`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PepSynthParams {
    pub image_size: usize,
    pub num_raters: usize,
    pub p_absent: f64,
    pub jitter: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Library defaults for [`PepSynthParams`].
#[no_mangle]
pub extern "C" fn pep_synth_default() -> PepSynthParams {
    let d = SynthParams::default();
    PepSynthParams {
        image_size: d.image_size,
        num_raters: d.num_raters,
        p_absent: d.p_absent,
        jitter: d.jitter,
        noise_sigma: d.noise_sigma,
        seed: d.seed,
    }
}

/// Generates sample `index` of the dataset defined by `params`: the same
/// image and masks `pepnet generate-data` writes at that index. Writes
/// `size²` floats to `image_out` and `num_raters · size²` bytes (0 or 1)
/// to `masks_out`.
///
/// # Safety
/// `params` must be readable; outputs must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn pep_generate_sample(
    params: *const PepSynthParams,
    index: u64,
    image_out: *mut f32,
    masks_out: *mut u8,
) -> PepStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let sp = SynthParams {
            image_size: p.image_size,
            num_raters: p.num_raters,
            p_absent: p.p_absent,
            jitter: p.jitter,
            noise_sigma: p.noise_sigma,
            seed: p.seed,
        };
        sp.validate()?;
        let n = plane_len(sp.image_size, sp.image_size)?;
        let img = slice_mut(image_out, n, "image_out")?;
        let dst = slice_mut(masks_out, n * sp.num_raters, "masks_out")?;
        let mut rng = stream_rng(sp.seed, Stream::Synth, index);
        let sample = generate_sample(&sp, &mut rng);
        img.copy_from_slice(&sample.image);
        for (chunk, mask) in dst.chunks_mut(n).zip(&sample.masks) {
            for (d, &b) in chunk.iter_mut().zip(mask.bits()) {
                *d = b as u8;
            }
        }
        Ok(())
    })
}
