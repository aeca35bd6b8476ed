//! C interface to `equimod`.
//!
//! Every function returns an [`EqmStatus`]. On failure the message is kept
//! per thread and read with [`eqm_last_error`]. Objects cross the boundary
//! as opaque handles that the caller releases with the matching `*_free`.
//! Matrices are dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use candle_core::{Device, Tensor};
use equimod::augcodec::{
    encode_trace, fit_profile_normalizer, sample_trace, AugmentationPolicy, Baseline, CodecProfile, Dataset,
    ImageSize, LayoutDescriptor, PolicyPair, View,
};
use equimod::evalsuite::{absolute_equivariance, relative_equivariance};
use equimod::expcli::{preset, ExperimentConfig};
use equimod::objectives::{equimod_loss, simclr_invariance_loss, Denominator, EmbeddingBundle};
use equimod::{seeding, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqmDataset {
    Cifar10 = 0,
    Imagenet = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqmBaseline {
    Simclr = 0,
    Byol = 1,
    Barlow = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqmView {
    First = 0,
    Second = 1,
}

/// Augmentation policy for one view.
pub struct EqmPolicy {
    policy: AugmentationPolicy,
    profile: CodecProfile,
}

/// Encoding layout with fitted normalization statistics.
pub struct EqmLayout {
    layout: LayoutDescriptor,
}

/// Experiment configuration.
pub struct EqmConfig {
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EqmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Policy(_) => EqmStatus::Config,
            Error::Shape { .. } | Error::Encoding(_) => EqmStatus::Shape,
            Error::ZeroNorm(_) | Error::EmptyDenominator { .. } | Error::NonFinite(_) => EqmStatus::Numeric,
            Error::Io { .. } | Error::Ingest { .. } | Error::Checkpoint(_) | Error::Image(_) => EqmStatus::Io,
            _ => EqmStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure(EqmStatus::Internal, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EqmStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EqmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EqmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            EqmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(EqmStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Failure> {
    Ok(Tensor::from_slice(data, (rows, cols), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64, Failure> {
    Ok(t.to_scalar::<f64>()?)
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    non_null(out, what)?;
    *out = value;
    Ok(())
}

fn profile(dataset: EqmDataset, baseline: EqmBaseline) -> CodecProfile {
    let dataset = match dataset {
        EqmDataset::Cifar10 => Dataset::Cifar10,
        EqmDataset::Imagenet => Dataset::Imagenet,
    };
    let baseline = match baseline {
        EqmBaseline::Simclr => Baseline::Simclr,
        EqmBaseline::Byol => Baseline::Byol,
        EqmBaseline::Barlow => Baseline::Barlow,
    };
    CodecProfile::new(dataset, baseline)
}

/// Human-readable message for the last failure on this thread, or null.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn eqm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn eqm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Preset policy for one view of a dataset/baseline pairing.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eqm_policy_new(
    dataset: EqmDataset,
    baseline: EqmBaseline,
    view: EqmView,
    out: *mut *mut EqmPolicy,
) -> EqmStatus {
    guard(|| {
        let profile = profile(dataset, baseline);
        let view = match view {
            EqmView::First => View::First,
            EqmView::Second => View::Second,
        };
        let policy = AugmentationPolicy::preset(profile, view);
        policy.validate()?;
        put(out, Box::into_raw(Box::new(EqmPolicy { policy, profile })), "out")
    })
}

/// # Safety
/// `policy` must be null or a live handle from [`eqm_policy_new`].
#[no_mangle]
pub unsafe extern "C" fn eqm_policy_free(policy: *mut EqmPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Length of the raw trace encoding for the policy's profile.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_policy_encoding_len(policy: *const EqmPolicy, out: *mut usize) -> EqmStatus {
    guard(|| {
        non_null(policy, "policy")?;
        put(out, (*policy).profile.encoding_len(), "out")
    })
}

/// Samples an augmentation for a `width`×`height` source image and writes
/// its raw (unnormalized) encoding into `out[0..len]`.
///
/// # Safety
/// `policy` must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eqm_policy_sample_encoding(
    policy: *const EqmPolicy,
    width: u32,
    height: u32,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> EqmStatus {
    guard(|| {
        non_null(policy, "policy")?;
        non_null(out, "out")?;
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        let p = &*policy;
        let trace = sample_trace(&p.policy, ImageSize::new(width, height), &mut seeding::rng(seed, &[]));
        let v = encode_trace(&trace, p.profile)?;
        if v.len() != len {
            return Err(Failure(EqmStatus::Shape, format!("encoding has {} values, buffer holds {len}", v.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Fits normalization statistics on `samples` sampled traces over a fixed
/// source size, as the trainer does before a run.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn eqm_layout_fit(
    dataset: EqmDataset,
    baseline: EqmBaseline,
    width: u32,
    height: u32,
    samples: usize,
    seed: u64,
    out: *mut *mut EqmLayout,
) -> EqmStatus {
    guard(|| {
        let profile = profile(dataset, baseline);
        let normalizer = fit_profile_normalizer(&PolicyPair::preset(profile), &[ImageSize::new(width, height)], samples, seed)?;
        let layout = LayoutDescriptor::new(profile, normalizer)?;
        put(out, Box::into_raw(Box::new(EqmLayout { layout })), "out")
    })
}

/// Reads a `layout.toml` written by a training run.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_layout_load(path: *const c_char, out: *mut *mut EqmLayout) -> EqmStatus {
    guard(|| {
        let layout = LayoutDescriptor::load(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(EqmLayout { layout })), "out")
    })
}

/// # Safety
/// `layout` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eqm_layout_free(layout: *mut EqmLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_layout_len(layout: *const EqmLayout, out: *mut usize) -> EqmStatus {
    guard(|| {
        non_null(layout, "layout")?;
        put(out, (*layout).layout.length, "out")
    })
}

/// Standardizes a raw encoding of length `len` into `out`.
///
/// # Safety
/// `raw` and `out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eqm_layout_normalize(
    layout: *const EqmLayout,
    raw: *const f64,
    len: usize,
    out: *mut f64,
) -> EqmStatus {
    guard(|| {
        non_null(layout, "layout")?;
        non_null(out, "out")?;
        let v = (*layout).layout.normalizer.normalize(slice_arg(raw, len, "raw")?)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// # Safety
/// `name` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_config_from_preset(name: *const c_char, out: *mut *mut EqmConfig) -> EqmStatus {
    guard(|| {
        let config = preset(str_arg(name, "name")?)?;
        put(out, Box::into_raw(Box::new(EqmConfig { config })), "out")
    })
}

/// # Safety
/// `toml` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_config_from_toml(toml: *const c_char, out: *mut *mut EqmConfig) -> EqmStatus {
    guard(|| {
        let config = ExperimentConfig::from_toml(str_arg(toml, "toml")?)?;
        put(out, Box::into_raw(Box::new(EqmConfig { config })), "out")
    })
}

/// Sets a dotted key to a TOML literal, e.g. `("loss.lambda", "0.5")`.
/// The config is unchanged when the override is rejected.
///
/// # Safety
/// `config` must be live; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn eqm_config_set(config: *mut EqmConfig, key: *const c_char, value: *const c_char) -> EqmStatus {
    guard(|| {
        non_null(config, "config")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        (*config).config.set(key, value)?;
        Ok(())
    })
}

/// Serializes the config; release the result with [`eqm_string_free`].
///
/// # Safety
/// `config` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_config_to_toml(config: *const EqmConfig, out: *mut *mut c_char) -> EqmStatus {
    guard(|| {
        non_null(config, "config")?;
        let s = (*config).config.to_toml()?;
        let c = CString::new(s).map_err(|_| Failure(EqmStatus::Internal, "config contains NUL".into()))?;
        put(out, c.into_raw(), "out")
    })
}

/// # Safety
/// `config` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eqm_config_free(config: *mut EqmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Mean equivariance loss over `views` = 2N rows. Row `a` and row
/// `(a + N) mod 2N` are the two views of one image. `z_equi` and `z_pred`
/// are `views × width`. A nonzero `include_positive` adds the positive pair
/// to the denominator.
///
/// # Safety
/// Both arrays must hold `views * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_equimod_loss(
    z_equi: *const f64,
    z_pred: *const f64,
    views: usize,
    width: usize,
    tau_prime: f64,
    include_positive: i32,
    out: *mut f64,
) -> EqmStatus {
    guard(|| {
        if views % 2 != 0 || width == 0 {
            return Err(Failure(EqmStatus::Shape, format!("need an even number of views and positive width, got {views}×{width}")));
        }
        if !(tau_prime > 0.0) {
            return Err(invalid("tau_prime must be positive"));
        }
        let ze = matrix(slice_arg(z_equi, views * width, "z_equi")?, views, width)?;
        let zp = matrix(slice_arg(z_pred, views * width, "z_pred")?, views, width)?;
        let bundle = EmbeddingBundle {
            z: ze.clone(),
            z_orig: ze.narrow(0, 0, views / 2)?,
            z_equi: ze,
            z_pred: zp,
        };
        let denominator = if include_positive != 0 {
            Denominator::IncludePositive
        } else {
            Denominator::Verbatim
        };
        put(out, scalar(&equimod_loss(&bundle, tau_prime, denominator)?)?, "out")
    })
}

/// NT-Xent over `views` = 2N rows of `z` (`views × width`).
///
/// # Safety
/// `z` must hold `views * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_simclr_loss(z: *const f64, views: usize, width: usize, tau: f64, out: *mut f64) -> EqmStatus {
    guard(|| {
        if views % 2 != 0 || width == 0 {
            return Err(Failure(EqmStatus::Shape, format!("need an even number of views and positive width, got {views}×{width}")));
        }
        if !(tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        let z = matrix(slice_arg(z, views * width, "z")?, views, width)?;
        put(out, scalar(&simclr_invariance_loss(&z, tau)?)?, "out")
    })
}

unsafe fn triple<'a>(
    z_view: *const f64,
    z_pred: *const f64,
    z_orig: *const f64,
    width: usize,
) -> Result<(&'a [f64], &'a [f64], &'a [f64]), Failure> {
    if width == 0 {
        return Err(Failure(EqmStatus::Shape, "width must be positive".into()));
    }
    Ok((
        slice_arg(z_view, width, "z_view")?,
        slice_arg(z_pred, width, "z_pred")?,
        slice_arg(z_orig, width, "z_orig")?,
    ))
}

/// `cos(z_view, z_pred) − cos(z_view, z_orig)` for single vectors.
///
/// # Safety
/// Each array must hold `width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_absolute_equivariance(
    z_view: *const f64,
    z_pred: *const f64,
    z_orig: *const f64,
    width: usize,
    out: *mut f64,
) -> EqmStatus {
    guard(|| {
        let (v, p, o) = triple(z_view, z_pred, z_orig, width)?;
        put(out, absolute_equivariance(v, p, o)?, "out")
    })
}

/// `(1 − cos(z_view, z_orig)) / (1 − cos(z_view, z_pred))`, denominator floored.
///
/// # Safety
/// Each array must hold `width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn eqm_relative_equivariance(
    z_view: *const f64,
    z_pred: *const f64,
    z_orig: *const f64,
    width: usize,
    out: *mut f64,
) -> EqmStatus {
    guard(|| {
        let (v, p, o) = triple(z_view, z_pred, z_orig, width)?;
        put(out, relative_equivariance(v, p, o)?, "out")
    })
}
