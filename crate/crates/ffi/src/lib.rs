//! C interface to the pose estimator and trained scene-coordinate regressors.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every call returns a [`DsacStatus`]; on failure
//! [`dsac_last_error`] describes the problem for the calling thread.
//!
//! Array layout: points are packed `x, y, z` triples, pixels `u, v` pairs and
//! descriptors one contiguous `input_dim` block per pixel.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dsac_core::geom::{Intrinsics, Pose};
use dsac_core::regressor::{Checkpoint, Mlp, CHECKPOINT_FORMAT};
use dsac_core::robust::{estimate, EstimatorConfig, SelectionMode};
use dsac_core::solvers::{Correspondences, Measurements, Mode};
use dsac_core::store::load_json;
use nalgebra::{DMatrix, Vector2, Vector3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Estimation failed, e.g. no minimal set produced a hypothesis.
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsacMode {
    /// 3D-3D: camera-frame points from a depth sensor, threshold in meters.
    Rgbd = 0,
    /// 2D-3D: pixels with known intrinsics, threshold in pixels.
    Rgb = 1,
}

/// Camera-to-scene transform `y = R e + t`, `R` row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsacPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsacIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Estimator settings; opaque to C.
pub struct DsacEstimator {
    mode: Mode,
    config: EstimatorConfig,
}

/// Trained regressor; opaque to C.
pub struct DsacRegressor {
    network: Mlp,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(DsacStatus, String);

type Outcome = Result<(), Failure>;

fn fail<T>(status: DsacStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Outcome) -> DsacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DsacStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error");
            DsacStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(DsacStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `len` readable values when non-null.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn points(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn pose_out(pose: &Pose) -> DsacPose {
    let r = pose.rotation_matrix();
    DsacPose {
        rotation: [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ],
        translation: [pose.translation.x, pose.translation.y, pose.translation.z],
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dsac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an estimator with `hypotheses` hypotheses and inlier threshold
/// `threshold` (meters for RGB-D, pixels for RGB). A non-positive threshold
/// selects the mode default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dsac_estimator_new(
    mode: DsacMode,
    hypotheses: u32,
    threshold: f64,
    out: *mut *mut DsacEstimator,
) -> DsacStatus {
    guard(|| {
        non_null(out, "out")?;
        let mode = match mode {
            DsacMode::Rgbd => Mode::Rgbd,
            DsacMode::Rgb => Mode::Rgb,
        };
        let mut config = EstimatorConfig::for_mode(mode);
        config.hypotheses = hypotheses as usize;
        if threshold > 0.0 {
            config.threshold = threshold;
        }
        if let Err(e) = config.validate() {
            return fail(DsacStatus::InvalidArgument, e.to_string());
        }
        *out = Box::into_raw(Box::new(DsacEstimator { mode, config }));
        Ok(())
    })
}

/// # Safety
/// `est` must be null or a handle from [`dsac_estimator_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dsac_estimator_free(est: *mut DsacEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

unsafe fn run_estimate(
    est: *const DsacEstimator,
    meas: &Measurements,
    scene: &[Vector3<f64>],
    seed: u64,
    out_pose: *mut DsacPose,
    out_inliers: *mut usize,
) -> Outcome {
    non_null(out_pose, "out_pose")?;
    let corrs = match Correspondences::new(meas, scene) {
        Ok(c) => c,
        Err(e) => return fail(DsacStatus::InvalidArgument, e.to_string()),
    };
    match estimate(&corrs, &(*est).config, SelectionMode::Test, seed) {
        Ok(r) => {
            *out_pose = pose_out(&r.pose);
            if !out_inliers.is_null() {
                *out_inliers = r.inliers.len();
            }
            Ok(())
        }
        Err(e) => fail(DsacStatus::Numerical, e.to_string()),
    }
}

/// Robust pose from `n` camera-frame points and their scene coordinates.
/// `out_inliers` may be null.
///
/// # Safety
/// `camera_points` and `scene_coords` must each hold `3 n` doubles; `est`
/// must be a live RGB-D estimator handle.
#[no_mangle]
pub unsafe extern "C" fn dsac_estimate_rgbd(
    est: *const DsacEstimator,
    camera_points: *const f64,
    scene_coords: *const f64,
    n: usize,
    seed: u64,
    out_pose: *mut DsacPose,
    out_inliers: *mut usize,
) -> DsacStatus {
    guard(|| {
        non_null(est, "est")?;
        if (*est).mode != Mode::Rgbd {
            return fail(DsacStatus::InvalidArgument, "estimator was created for RGB input");
        }
        let camera = points(slice(camera_points, 3 * n, "camera_points")?);
        let scene = points(slice(scene_coords, 3 * n, "scene_coords")?);
        run_estimate(est, &Measurements::Rgbd { points: camera }, &scene, seed, out_pose, out_inliers)
    })
}

/// Robust pose from `n` pixels and their scene coordinates.
/// `out_inliers` may be null.
///
/// # Safety
/// `pixels` must hold `2 n` doubles and `scene_coords` `3 n`; `est` must be
/// a live RGB estimator handle.
#[no_mangle]
pub unsafe extern "C" fn dsac_estimate_rgb(
    est: *const DsacEstimator,
    intrinsics: DsacIntrinsics,
    pixels: *const f64,
    scene_coords: *const f64,
    n: usize,
    seed: u64,
    out_pose: *mut DsacPose,
    out_inliers: *mut usize,
) -> DsacStatus {
    guard(|| {
        non_null(est, "est")?;
        if (*est).mode != Mode::Rgb {
            return fail(DsacStatus::InvalidArgument, "estimator was created for RGB-D input");
        }
        let k = match Intrinsics::new(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy) {
            Ok(k) => k,
            Err(e) => return fail(DsacStatus::InvalidArgument, e.to_string()),
        };
        let px = slice(pixels, 2 * n, "pixels")?
            .chunks_exact(2)
            .map(|c| Vector2::new(c[0], c[1]))
            .collect();
        let scene = points(slice(scene_coords, 3 * n, "scene_coords")?);
        run_estimate(
            est,
            &Measurements::Rgb { intrinsics: k, pixels: px },
            &scene,
            seed,
            out_pose,
            out_inliers,
        )
    })
}

/// Loads a regressor from a training checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsac_regressor_load(path: *const c_char, out: *mut *mut DsacRegressor) -> DsacStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(DsacStatus::InvalidArgument, "path is not UTF-8");
        };
        let ckpt: Checkpoint = match load_json(Path::new(path), CHECKPOINT_FORMAT) {
            Ok(c) => c,
            Err(e) => return fail(DsacStatus::Io, e.to_string()),
        };
        *out = Box::into_raw(Box::new(DsacRegressor { network: ckpt.network }));
        Ok(())
    })
}

/// # Safety
/// `reg` must be null or a handle from [`dsac_regressor_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dsac_regressor_free(reg: *mut DsacRegressor) {
    if !reg.is_null() {
        drop(Box::from_raw(reg));
    }
}

/// Descriptor length the regressor expects, or 0 for a null handle.
///
/// # Safety
/// `reg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsac_regressor_input_dim(reg: *const DsacRegressor) -> usize {
    if reg.is_null() {
        0
    } else {
        (*reg).network.input_dim()
    }
}

/// Predicts scene coordinates for `n` pixels.
///
/// # Safety
/// `features` must hold `n * input_dim` doubles and `out_coords` room for
/// `3 n`.
#[no_mangle]
pub unsafe extern "C" fn dsac_regressor_predict(
    reg: *const DsacRegressor,
    features: *const f64,
    n: usize,
    out_coords: *mut f64,
) -> DsacStatus {
    guard(|| {
        non_null(reg, "reg")?;
        non_null(out_coords, "out_coords")?;
        let dim = (*reg).network.input_dim();
        let x = DMatrix::from_column_slice(dim, n, slice(features, dim * n, "features")?);
        let coords = match (*reg).network.predict(&x) {
            Ok(c) => c,
            Err(e) => return fail(DsacStatus::InvalidArgument, e.to_string()),
        };
        let out = std::slice::from_raw_parts_mut(out_coords, 3 * n);
        for (dst, y) in out.chunks_exact_mut(3).zip(&coords) {
            dst.copy_from_slice(y.as_slice());
        }
        Ok(())
    })
}
