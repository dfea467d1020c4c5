//! C interface to the multipose library.
//!
//! Every fallible function returns an [`MpStatus`]; on failure the message
//! is available from [`mp_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use multipose::control::FusionMode;
use multipose::model::{ModelConfig, ParamSet};
use multipose::pipeline::{generate, GenOptions, SampleConfig};
use multipose::pose::PoseTrackSet;
use multipose::tensor_io::{read_weights, write_weights};
use multipose::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A file could not be read or written.
    Io = 2,
    /// Inputs failed validation (bad prompt, pose file, shapes, sizes).
    Invalid = 3,
    /// Non-finite values or divergence.
    Numeric = 4,
    /// A string argument was not valid UTF-8.
    Utf8 = 5,
    /// An internal invariant failed; the library state is unchanged.
    Internal = 6,
}

/// Loaded or freshly initialized denoiser weights.
pub struct MpModel {
    params: ParamSet<f32>,
}

/// A dense `f32` tensor produced by the library (frames or masks).
pub struct MpTensor {
    tensor: Tensor,
}

/// Generation switches; obtain defaults from [`mp_generate_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MpGenerateOptions {
    pub seed: u64,
    pub steps: u32,
    /// Non-zero enables region-masked cross-attention.
    pub spatial_attn: u8,
    /// Non-zero merges all control branches into one.
    pub single_branch: u8,
    /// Non-zero masks every control branch, including the first.
    pub fusion_all_masked: u8,
    /// Region-mask softmax sharpness, at least 1.
    pub mask_sharpness: f32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MpStatus {
    match e.exit_code() {
        2 => MpStatus::Io,
        4 => MpStatus::Numeric,
        _ => MpStatus::Invalid,
    }
}

fn fail(status: MpStatus, msg: &str) -> MpStatus {
    set_error(msg);
    status
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MpStatus>) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MpStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal error".into());
            fail(MpStatus::Internal, &msg)
        }
    }
}

fn lib<T>(r: multipose::Result<T>) -> Result<T, MpStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, MpStatus> {
    if p.is_null() {
        return Err(fail(MpStatus::NullArgument, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MpStatus::Utf8, &format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MpStatus> {
    if p.is_null() {
        Err(fail(MpStatus::NullArgument, &format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load weights from a weights file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mp_model_load(path: *const c_char, out: *mut *mut MpModel) -> MpStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = text(path, "path")?;
        let weights = lib(read_weights(path))?;
        let params = lib(ParamSet::from_weights(weights))?;
        *out = Box::into_raw(Box::new(MpModel { params }));
        Ok(())
    })
}

/// Seeded untrained model; `tiny` selects the small test architecture.
///
/// # Safety
/// `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mp_model_init(seed: u64, tiny: bool, out: *mut *mut MpModel) -> MpStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = if tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        *out = Box::into_raw(Box::new(MpModel { params: ParamSet::init(config, seed) }));
        Ok(())
    })
}

/// Write a model's weights file.
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mp_model_save(model: *const MpModel, path: *const c_char) -> MpStatus {
    guard(|| {
        non_null(model, "model")?;
        let path = text(path, "path")?;
        lib(write_weights(&(*model).params.to_weights(), Path::new(path)))
    })
}

/// Total number of scalar parameters.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_model_parameter_count(model: *const MpModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).params.count()
    }
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_model_free(model: *mut MpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Default generation options: full method, 50 steps, seed 0.
///
/// # Safety
/// `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mp_generate_options_default(out: *mut MpGenerateOptions) -> MpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = MpGenerateOptions {
            seed: 0,
            steps: 50,
            spatial_attn: 1,
            single_branch: 0,
            fusion_all_masked: 0,
            mask_sharpness: 1.0,
        };
        Ok(())
    })
}

fn parse_poses(json: &str) -> Result<PoseTrackSet, MpStatus> {
    PoseTrackSet::from_json_str(json).map_err(|e| fail(MpStatus::Invalid, &format!("pose JSON: {e}")))
}

/// Generate `[frames, 3, height, width]` pixels in `[0, 1]`.
///
/// # Safety
/// `model` is a live handle, `prompt` and `poses_json` are NUL-terminated
/// strings, `options` is null (defaults) or valid, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mp_generate(
    model: *const MpModel,
    prompt: *const c_char,
    poses_json: *const c_char,
    options: *const MpGenerateOptions,
    out: *mut *mut MpTensor,
) -> MpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let prompt = text(prompt, "prompt")?;
        let poses = parse_poses(text(poses_json, "poses_json")?)?;
        let mut o = std::mem::zeroed();
        if options.is_null() {
            mp_generate_options_default(&mut o);
        } else {
            o = *options;
        }
        if !(o.mask_sharpness.is_finite() && o.mask_sharpness >= 1.0) {
            return Err(fail(MpStatus::Invalid, "mask_sharpness must be >= 1"));
        }
        let opts = GenOptions {
            spatial_attn: o.spatial_attn != 0,
            single_branch: o.single_branch != 0,
            fusion: if o.fusion_all_masked != 0 { FusionMode::AllMasked } else { FusionMode::FirstUnmasked },
            sharpness: o.mask_sharpness,
            ..GenOptions::default()
        };
        let cfg = SampleConfig { steps: o.steps as usize, seed: o.seed, clip: true };
        let (frames, _) = lib(generate(&(*model).params, prompt, &poses, &opts, &cfg))?;
        *out = Box::into_raw(Box::new(MpTensor { tensor: frames }));
        Ok(())
    })
}

/// Normalized full-resolution region masks `[characters, frames, h, w]`.
///
/// # Safety
/// `poses_json` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mp_region_masks(poses_json: *const c_char, sharpness: f32, out: *mut *mut MpTensor) -> MpStatus {
    guard(|| {
        non_null(out, "out")?;
        let poses = parse_poses(text(poses_json, "poses_json")?)?;
        let maps = multipose::pose::rasterize_all(&poses, &Default::default());
        let (_, pyr) = lib(multipose::masks::mask_flow(&maps, sharpness))?;
        *out = Box::into_raw(Box::new(MpTensor { tensor: pyr.level(0).clone() }));
        Ok(())
    })
}

/// Number of dimensions; 0 for a null handle.
///
/// # Safety
/// `t` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_ndim(t: *const MpTensor) -> usize {
    if t.is_null() {
        0
    } else {
        (*t).tensor.dims().len()
    }
}

/// Copy up to `cap` extents into `dims`; returns the number of dimensions.
///
/// # Safety
/// `t` is a live handle; `dims` has room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_dims(t: *const MpTensor, dims: *mut usize, cap: usize) -> MpStatus {
    guard(|| {
        non_null(t, "tensor")?;
        non_null(dims, "dims")?;
        let d = (*t).tensor.dims();
        if cap < d.len() {
            return Err(fail(MpStatus::Invalid, &format!("dims buffer holds {cap}, tensor has {} dimensions", d.len())));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), dims, d.len());
        Ok(())
    })
}

/// Number of elements; 0 for a null handle.
///
/// # Safety
/// `t` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_len(t: *const MpTensor) -> usize {
    if t.is_null() {
        0
    } else {
        (*t).tensor.len()
    }
}

/// Copy all elements in row-major order; `cap` must be at least the length.
///
/// # Safety
/// `t` is a live handle; `dst` has room for `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_copy(t: *const MpTensor, dst: *mut f32, cap: usize) -> MpStatus {
    guard(|| {
        non_null(t, "tensor")?;
        non_null(dst, "dst")?;
        let data = (*t).tensor.data();
        if cap < data.len() {
            return Err(fail(MpStatus::Invalid, &format!("buffer holds {cap}, tensor has {}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), dst, data.len());
        Ok(())
    })
}

/// Write each frame of a `[frames, 3, h, w]` tensor as `frame_NNN.ppm` in `dir`.
///
/// # Safety
/// `t` is a live handle; `dir` is a NUL-terminated path to an existing directory.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_write_frames(t: *const MpTensor, dir: *const c_char) -> MpStatus {
    guard(|| {
        non_null(t, "tensor")?;
        let dir = Path::new(text(dir, "dir")?);
        let frames = &(*t).tensor;
        if frames.dims().len() != 4 || frames.dims()[1] != 3 {
            return Err(fail(MpStatus::Invalid, &format!("expected [frames, 3, h, w], got {:?}", frames.dims())));
        }
        for f in 0..frames.dims()[0] {
            lib(multipose::image::write_ppm(&frames.slice_outer(f), dir.join(format!("frame_{f:03}.ppm"))))?;
        }
        Ok(())
    })
}

/// # Safety
/// `t` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_tensor_free(t: *mut MpTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Split a tagged prompt into one prompt per character, joined by newlines.
/// Free the result with [`mp_string_free`].
///
/// # Safety
/// `prompt` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mp_split_prompt(prompt: *const c_char, characters: usize, out: *mut *mut c_char) -> MpStatus {
    guard(|| {
        non_null(out, "out")?;
        let prompt = text(prompt, "prompt")?;
        let tagged = lib(multipose::prompt::parse_prompt(prompt).map_err(Error::from))?;
        let split = lib(multipose::prompt::split_prompt(&tagged, characters).map_err(Error::from))?;
        let joined = CString::new(split.prompts.join("\n")).map_err(|_| fail(MpStatus::Internal, "NUL in prompt"))?;
        *out = joined.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
