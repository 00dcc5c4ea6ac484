use std::ffi::{CStr, CString};
use std::ptr;

use dsac_core::regressor::{Adam, Checkpoint, Mlp, Preset, CHECKPOINT_FORMAT};
use dsac_core::sim::{gen_scene, gen_trajectory, render, Observation, RenderConfig};
use dsac_core::store::save_json;
use dsac_ffi::*;
use nalgebra::{Matrix3, Vector3};

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsac_last_error()) }.to_string_lossy().into_owned()
}

fn observation(outlier_frac: f64) -> Observation {
    let scene = gen_scene(500, 4.0, 9).unwrap();
    let pose = gen_trajectory(&scene, 1, 9).unwrap()[0];
    let cfg = RenderConfig {
        noise_px: 0.5,
        noise_m: 0.005,
        outlier_frac,
        ..RenderConfig::default()
    };
    render(&scene, &pose, &cfg, 9).unwrap()
}

fn flat3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn assert_close(pose: &DsacPose, obs: &Observation) {
    let r = Matrix3::from_row_slice(&pose.rotation);
    let t = Vector3::from_column_slice(&pose.translation);
    assert!((t - obs.pose.translation).norm() < 0.02, "translation {t:?}");
    let dr = r.transpose() * obs.pose.rotation_matrix();
    let angle = ((dr.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle < 1.0, "rotation off by {angle} deg");
}

fn estimator(mode: DsacMode) -> *mut DsacEstimator {
    let mut est = ptr::null_mut();
    assert_eq!(unsafe { dsac_estimator_new(mode, 64, 0.0, &mut est) }, DsacStatus::Ok);
    assert!(!est.is_null());
    est
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(dsac_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn invalid_arguments_report_status_and_message() {
    assert_eq!(
        unsafe { dsac_estimator_new(DsacMode::Rgbd, 64, 0.1, ptr::null_mut()) },
        DsacStatus::NullPointer
    );
    assert!(last_error().contains("out"));
    let mut est = ptr::null_mut();
    assert_eq!(
        unsafe { dsac_estimator_new(DsacMode::Rgbd, 0, 0.1, &mut est) },
        DsacStatus::InvalidArgument
    );
    assert!(est.is_null());
    assert!(!last_error().is_empty());

    let est = estimator(DsacMode::Rgbd);
    assert!(last_error().is_empty());
    let mut pose = DsacPose {
        rotation: [0.0; 9],
        translation: [0.0; 3],
    };
    let status = unsafe { dsac_estimate_rgbd(est, ptr::null(), ptr::null(), 10, 0, &mut pose, ptr::null_mut()) };
    assert_eq!(status, DsacStatus::NullPointer);
    let k = DsacIntrinsics {
        fx: 500.0,
        fy: 500.0,
        cx: 320.0,
        cy: 240.0,
    };
    let data = [0.0; 30];
    let status = unsafe { dsac_estimate_rgb(est, k, data.as_ptr(), data.as_ptr(), 10, 0, &mut pose, ptr::null_mut()) };
    assert_eq!(status, DsacStatus::InvalidArgument, "mode mismatch");
    unsafe { dsac_estimator_free(est) };
    unsafe { dsac_estimator_free(ptr::null_mut()) };
}

#[test]
fn too_few_points_is_an_error() {
    let est = estimator(DsacMode::Rgbd);
    let data = [1.0; 6];
    let mut pose = DsacPose {
        rotation: [0.0; 9],
        translation: [0.0; 3],
    };
    let status = unsafe { dsac_estimate_rgbd(est, data.as_ptr(), data.as_ptr(), 2, 0, &mut pose, ptr::null_mut()) };
    assert_ne!(status, DsacStatus::Ok);
    assert!(!last_error().is_empty());
    unsafe { dsac_estimator_free(est) };
}

#[test]
fn rgbd_estimate_recovers_the_pose() {
    let obs = observation(0.3);
    let est = estimator(DsacMode::Rgbd);
    let cam = flat3(&obs.camera_points);
    let scene = flat3(&obs.coords);
    let mut pose = DsacPose {
        rotation: [0.0; 9],
        translation: [0.0; 3],
    };
    let mut inliers = 0usize;
    let status = unsafe {
        dsac_estimate_rgbd(est, cam.as_ptr(), scene.as_ptr(), obs.len(), 1, &mut pose, &mut inliers)
    };
    assert_eq!(status, DsacStatus::Ok, "{}", last_error());
    assert_close(&pose, &obs);
    let outliers = obs.outlier_count();
    assert!(inliers <= obs.len() - outliers && inliers > (obs.len() - outliers) * 9 / 10);
    unsafe { dsac_estimator_free(est) };
}

#[test]
fn rgb_estimate_recovers_the_pose() {
    let obs = observation(0.3);
    let est = estimator(DsacMode::Rgb);
    let px: Vec<f64> = obs.pixels.iter().flat_map(|p| [p.x, p.y]).collect();
    let scene = flat3(&obs.coords);
    let k = DsacIntrinsics {
        fx: obs.intrinsics.fx,
        fy: obs.intrinsics.fy,
        cx: obs.intrinsics.cx,
        cy: obs.intrinsics.cy,
    };
    let mut pose = DsacPose {
        rotation: [0.0; 9],
        translation: [0.0; 3],
    };
    let status = unsafe {
        dsac_estimate_rgb(est, k, px.as_ptr(), scene.as_ptr(), obs.len(), 1, &mut pose, ptr::null_mut())
    };
    assert_eq!(status, DsacStatus::Ok, "{}", last_error());
    assert_close(&pose, &obs);
    unsafe { dsac_estimator_free(est) };
}

#[test]
fn regressor_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mlp = Mlp::preset(Preset::Tiny, 4);
    let ckpt = Checkpoint {
        preset: Some(Preset::Tiny),
        optimizer: Adam::new(&mlp, 1e-4),
        network: mlp.clone(),
        iteration: 0,
        phase: "init".into(),
    };
    save_json(&path, CHECKPOINT_FORMAT, &ckpt).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut reg = ptr::null_mut();
    assert_eq!(unsafe { dsac_regressor_load(cpath.as_ptr(), &mut reg) }, DsacStatus::Ok);
    let dim = unsafe { dsac_regressor_input_dim(reg) };
    assert_eq!(dim, mlp.input_dim());

    let obs = observation(0.0);
    let n = 7;
    let features: Vec<f64> = (0..n).flat_map(|j| obs.descriptors.column(j).iter().copied().collect::<Vec<_>>()).collect();
    let mut out = vec![0.0; 3 * n];
    assert_eq!(
        unsafe { dsac_regressor_predict(reg, features.as_ptr(), n, out.as_mut_ptr()) },
        DsacStatus::Ok
    );
    let expected = mlp.predict(&obs.descriptors.columns(0, n).into_owned()).unwrap();
    assert_eq!(out, flat3(&expected));
    unsafe { dsac_regressor_free(reg) };

    let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
    let mut reg = ptr::null_mut();
    assert_eq!(unsafe { dsac_regressor_load(missing.as_ptr(), &mut reg) }, DsacStatus::Io);
    assert!(reg.is_null());
    assert_eq!(unsafe { dsac_regressor_input_dim(ptr::null()) }, 0);
}

#[test]
fn generated_header_is_valid_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dsac.h");
    let text = std::fs::read_to_string(&header).expect("header generated by the build script");
    for f in [
        "dsac_estimator_new",
        "dsac_estimate_rgbd",
        "dsac_estimate_rgb",
        "dsac_regressor_predict",
        "dsac_last_error",
        "typedef struct DsacEstimator DsacEstimator",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"dsac.h\"\nint main(void) { DsacEstimator *e = 0; DsacStatus s = dsac_estimator_new(DSAC_MODE_RGBD, 64, 0.1, &e); dsac_estimator_free(e); return (int)s; }\n",
    )
    .unwrap();
    // only checked where a C compiler is installed
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
