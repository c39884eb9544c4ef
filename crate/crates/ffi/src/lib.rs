//! C interface to `mbdepth`.
//!
//! Objects are opaque handles owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns an [`MbdStatus`];
//! on failure `mbd_last_error_message` describes the error on the calling
//! thread. Panics are caught at the boundary and reported as
//! `MBD_STATUS_INTERNAL`.

#![allow(clippy::missing_safety_doc)]

use mbdepth::bundle_io::{read_bundle, render_synthetic_bundle, write_bundle, LidarModel, RenderParams, SceneSpec, TremorParams};
use mbdepth::eval::{photometric_error, write_pfm};
use mbdepth::refine::{compute_z_avg, reconstruct, train, Bundle, Precision, RefinementModel, TrainConfig, TrainLog};
use mbdepth::ImageGrid;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Training = 5,
    Internal = 6,
}

/// A loaded or generated bundle.
pub struct MbdBundle(Bundle);

/// A trained model with its training log.
pub struct MbdModel {
    model: RefinementModel,
    log: TrainLog,
}

/// A single-channel depth map.
pub struct MbdDepth(ImageGrid);

/// Training settings; initialize with [`mbd_train_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MbdTrainConfig {
    pub samples: usize,
    pub patch_half_width: usize,
    pub levels: usize,
    pub alpha: f64,
    pub base_lr: f64,
    pub decay: f64,
    pub confidence_lr: f64,
    pub epochs: usize,
    pub frame_stride: usize,
    pub direct_depth: bool,
    /// Replace sensor depth with this value when positive.
    pub constant_init_depth: f64,
    pub median_filter_confidence: bool,
    pub seed: u64,
    /// Run network passes in single precision.
    pub single_precision: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: MbdStatus, msg: impl Into<String>) -> MbdStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> MbdStatus) -> MbdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MbdStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, MbdStatus> {
    if p.is_null() {
        return Err(fail(MbdStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(MbdStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn refine_status(e: &mbdepth::refine::RefineError) -> MbdStatus {
    use mbdepth::refine::RefineError::*;
    match e {
        InvalidConfig(_) | InvalidBundle(_) => MbdStatus::InvalidArgument,
        _ => MbdStatus::Training,
    }
}

fn io_status(e: &mbdepth::bundle_io::BundleIoError) -> MbdStatus {
    match e {
        mbdepth::bundle_io::BundleIoError::Io { .. } => MbdStatus::Io,
        _ => MbdStatus::Format,
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mbd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mbd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_read(dir: *const c_char, out: *mut *mut MbdBundle) -> MbdStatus {
    guard(|| {
        if out.is_null() {
            return fail(MbdStatus::NullPointer, "out is null");
        }
        let dir = match path_arg(dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_bundle(&dir) {
            Ok(b) => {
                *out = Box::into_raw(Box::new(MbdBundle(b)));
                MbdStatus::Ok
            }
            Err(e) => fail(io_status(&e), e.to_string()),
        }
    })
}

/// Render a built-in synthetic scene (`plane`, `sphere-on-plane`,
/// `box-on-plane`, `checker`, `flat`) with default tremor and sensor models.
#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_generate(
    scene: *const c_char,
    seed: u64,
    frames: usize,
    width: usize,
    height: usize,
    out: *mut *mut MbdBundle,
) -> MbdStatus {
    guard(|| {
        if out.is_null() || scene.is_null() {
            return fail(MbdStatus::NullPointer, "scene or out is null");
        }
        let Ok(name) = CStr::from_ptr(scene).to_str() else {
            return fail(MbdStatus::InvalidArgument, "scene name is not valid UTF-8");
        };
        let Some(spec) = SceneSpec::by_name(name) else {
            return fail(MbdStatus::InvalidArgument, format!("unknown scene `{name}`"));
        };
        if width < 8 || height < 8 || frames == 0 {
            return fail(MbdStatus::InvalidArgument, "need at least one frame and an 8x8 image");
        }
        let tremor = TremorParams {
            frames,
            seed,
            ..Default::default()
        };
        let lidar = LidarModel { seed, ..Default::default() };
        match render_synthetic_bundle(&spec, &tremor, &RenderParams::with_resolution(width, height), &lidar) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(MbdBundle(s.bundle)));
                MbdStatus::Ok
            }
            Err(e) => fail(refine_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_write(bundle: *const MbdBundle, dir: *const c_char) -> MbdStatus {
    guard(|| {
        let Some(b) = bundle.as_ref() else {
            return fail(MbdStatus::NullPointer, "bundle is null");
        };
        let dir = match path_arg(dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_bundle(&b.0, &dir) {
            Ok(_) => MbdStatus::Ok,
            Err(e) => fail(io_status(&e), e.to_string()),
        }
    })
}

/// Number of frames, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_frame_count(bundle: *const MbdBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.len())
}

/// RGB and depth-grid dimensions.
#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_dims(bundle: *const MbdBundle, height: *mut usize, width: *mut usize, depth_height: *mut usize, depth_width: *mut usize) -> MbdStatus {
    guard(|| {
        let Some(b) = bundle.as_ref() else {
            return fail(MbdStatus::NullPointer, "bundle is null");
        };
        if height.is_null() || width.is_null() || depth_height.is_null() || depth_width.is_null() {
            return fail(MbdStatus::NullPointer, "output pointer is null");
        }
        let (h, w, hd, wd) = b.0.dims();
        *height = h;
        *width = w;
        *depth_height = hd;
        *depth_width = wd;
        MbdStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_bundle_free(bundle: *mut MbdBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mbd_train_config_default(out: *mut MbdTrainConfig) -> MbdStatus {
    let Some(out) = out.as_mut() else {
        return fail(MbdStatus::NullPointer, "out is null");
    };
    let d = TrainConfig::default();
    *out = MbdTrainConfig {
        samples: d.samples,
        patch_half_width: d.patch_half_width,
        levels: d.levels,
        alpha: d.alpha,
        base_lr: d.base_lr,
        decay: d.decay,
        confidence_lr: d.confidence_lr,
        epochs: d.epochs,
        frame_stride: d.frame_stride,
        direct_depth: d.direct_depth,
        constant_init_depth: d.constant_init_depth.unwrap_or(0.0),
        median_filter_confidence: d.median_filter_confidence,
        seed: d.seed,
        single_precision: d.precision == Precision::F32,
    };
    MbdStatus::Ok
}

fn to_config(c: &MbdTrainConfig) -> TrainConfig {
    TrainConfig {
        samples: c.samples,
        patch_half_width: c.patch_half_width,
        levels: c.levels,
        alpha: c.alpha,
        base_lr: c.base_lr,
        decay: c.decay,
        confidence_lr: c.confidence_lr,
        epochs: c.epochs,
        frame_stride: c.frame_stride,
        direct_depth: c.direct_depth,
        constant_init_depth: (c.constant_init_depth > 0.0).then_some(c.constant_init_depth),
        median_filter_confidence: c.median_filter_confidence,
        seed: c.seed,
        precision: if c.single_precision { Precision::F32 } else { Precision::F64 },
        ..TrainConfig::default()
    }
}

#[no_mangle]
pub unsafe extern "C" fn mbd_train(bundle: *const MbdBundle, config: *const MbdTrainConfig, out: *mut *mut MbdModel) -> MbdStatus {
    guard(|| {
        let (Some(b), Some(c)) = (bundle.as_ref(), config.as_ref()) else {
            return fail(MbdStatus::NullPointer, "bundle or config is null");
        };
        if out.is_null() {
            return fail(MbdStatus::NullPointer, "out is null");
        }
        match train(&b.0, &to_config(c)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(MbdModel { model: t.model, log: t.log }));
                MbdStatus::Ok
            }
            Err(e) => fail(refine_status(&e), e.to_string()),
        }
    })
}

/// Number of logged epochs, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mbd_model_epoch_count(model: *const MbdModel) -> usize {
    model.as_ref().map_or(0, |m| m.log.epochs.len())
}

/// Mean total loss of epoch `epoch`.
#[no_mangle]
pub unsafe extern "C" fn mbd_model_epoch_loss(model: *const MbdModel, epoch: usize, total: *mut f64) -> MbdStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(MbdStatus::NullPointer, "model is null");
        };
        let Some(total) = total.as_mut() else {
            return fail(MbdStatus::NullPointer, "total is null");
        };
        match m.log.epochs.get(epoch) {
            Some(e) => {
                *total = e.mean_total;
                MbdStatus::Ok
            }
            None => fail(MbdStatus::InvalidArgument, format!("epoch {epoch} out of range")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_model_free(model: *mut MbdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mbd_compute_z_avg(bundle: *const MbdBundle, out: *mut *mut MbdDepth) -> MbdStatus {
    guard(|| {
        let Some(b) = bundle.as_ref() else {
            return fail(MbdStatus::NullPointer, "bundle is null");
        };
        if out.is_null() {
            return fail(MbdStatus::NullPointer, "out is null");
        }
        match compute_z_avg(&b.0) {
            Ok(z) => {
                *out = Box::into_raw(Box::new(MbdDepth(z)));
                MbdStatus::Ok
            }
            Err(e) => fail(refine_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_reconstruct(model: *const MbdModel, bundle: *const MbdBundle, z_avg: *const MbdDepth, out: *mut *mut MbdDepth) -> MbdStatus {
    guard(|| {
        let (Some(m), Some(b), Some(z)) = (model.as_ref(), bundle.as_ref(), z_avg.as_ref()) else {
            return fail(MbdStatus::NullPointer, "model, bundle or depth is null");
        };
        if out.is_null() {
            return fail(MbdStatus::NullPointer, "out is null");
        }
        match reconstruct(&m.model, &b.0, &z.0) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(MbdDepth(d)));
                MbdStatus::Ok
            }
            Err(e) => fail(refine_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_depth_dims(depth: *const MbdDepth, height: *mut usize, width: *mut usize) -> MbdStatus {
    guard(|| {
        let Some(d) = depth.as_ref() else {
            return fail(MbdStatus::NullPointer, "depth is null");
        };
        if height.is_null() || width.is_null() {
            return fail(MbdStatus::NullPointer, "output pointer is null");
        }
        *height = d.0.height();
        *width = d.0.width();
        MbdStatus::Ok
    })
}

/// Row-major depth values in meters; valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn mbd_depth_data(depth: *const MbdDepth) -> *const f32 {
    depth.as_ref().map_or(ptr::null(), |d| d.0.data().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn mbd_depth_write_pfm(depth: *const MbdDepth, path: *const c_char) -> MbdStatus {
    guard(|| {
        let Some(d) = depth.as_ref() else {
            return fail(MbdStatus::NullPointer, "depth is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_pfm(&path, &d.0) {
            Ok(()) => MbdStatus::Ok,
            Err(e) => fail(MbdStatus::Io, e.to_string()),
        }
    })
}

/// Photometric error of `depth` against the other frames of `bundle`.
#[no_mangle]
pub unsafe extern "C" fn mbd_photometric_error(depth: *const MbdDepth, bundle: *const MbdBundle, mae: *mut f64, mse: *mut f64) -> MbdStatus {
    guard(|| {
        let (Some(d), Some(b)) = (depth.as_ref(), bundle.as_ref()) else {
            return fail(MbdStatus::NullPointer, "depth or bundle is null");
        };
        if mae.is_null() || mse.is_null() {
            return fail(MbdStatus::NullPointer, "output pointer is null");
        }
        match photometric_error(&d.0, &b.0) {
            Ok(pe) => {
                *mae = pe.mae;
                *mse = pe.mse;
                MbdStatus::Ok
            }
            Err(e) => fail(MbdStatus::InvalidArgument, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mbd_depth_free(depth: *mut MbdDepth) {
    if !depth.is_null() {
        drop(Box::from_raw(depth));
    }
}
