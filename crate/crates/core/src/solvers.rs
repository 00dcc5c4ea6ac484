//! Forward pose solvers: closed-form Kabsch for 3D-3D correspondences,
//! a Grunert-style P3P for minimal 2D-3D sets, and Levenberg-Marquardt
//! refinement of the re-projection error.

use nalgebra::{DMatrix, Matrix3, Matrix3x6, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    camera_point_jacobian, residual_rgb, residual_rgb_grad, residual_rgbd,
    residual_rgbd_grad, skew, Intrinsics, Pose, ResidualGrad, BEHIND_CAMERA_RESIDUAL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("need at least {required} correspondences, got {actual}")]
    TooFewCorrespondences { required: usize, actual: usize },
    #[error("length mismatch: {left} observations vs {right} scene coordinates")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("P3P has no admissible solution")]
    NoSolution,
}

/// Which sensor the correspondences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rgb,
    Rgbd,
}

impl Mode {
    /// Minimal set size used for hypothesis sampling.
    pub fn minimal_set_size(self) -> usize {
        match self {
            Mode::Rgb => 4,
            Mode::Rgbd => 3,
        }
    }
}

/// Per-pixel sensor observations; index `i` pairs with scene coordinate `y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Measurements {
    Rgb {
        intrinsics: Intrinsics,
        pixels: Vec<Vector2<f64>>,
    },
    Rgbd {
        points: Vec<Vector3<f64>>,
    },
}

impl Measurements {
    pub fn mode(&self) -> Mode {
        match self {
            Measurements::Rgb { .. } => Mode::Rgb,
            Measurements::Rgbd { .. } => Mode::Rgbd,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Measurements::Rgb { pixels, .. } => pixels.len(),
            Measurements::Rgbd { points } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A correspondence field: measurements paired index-wise with scene
/// coordinates. Subsets are addressed by index lists.
#[derive(Debug, Clone, Copy)]
pub struct Correspondences<'a> {
    measurements: &'a Measurements,
    coords: &'a [Vector3<f64>],
}

impl<'a> Correspondences<'a> {
    pub fn new(
        measurements: &'a Measurements,
        coords: &'a [Vector3<f64>],
    ) -> Result<Self, SolverError> {
        if measurements.len() != coords.len() {
            return Err(SolverError::LengthMismatch {
                left: measurements.len(),
                right: coords.len(),
            });
        }
        if coords.is_empty() {
            return Err(SolverError::TooFewCorrespondences {
                required: 1,
                actual: 0,
            });
        }
        Ok(Self {
            measurements,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.measurements.mode()
    }

    pub fn measurements(&self) -> &'a Measurements {
        self.measurements
    }

    pub fn coords(&self) -> &'a [Vector3<f64>] {
        self.coords
    }

    pub fn residual(&self, i: usize, h: &Pose) -> f64 {
        match self.measurements {
            Measurements::Rgb { intrinsics, pixels } => {
                residual_rgb(&self.coords[i], h, &pixels[i], intrinsics)
            }
            Measurements::Rgbd { points } => residual_rgbd(&self.coords[i], h, &points[i]),
        }
    }

    pub fn residual_grad(&self, i: usize, h: &Pose) -> ResidualGrad {
        match self.measurements {
            Measurements::Rgb { intrinsics, pixels } => {
                residual_rgb_grad(&self.coords[i], h, &pixels[i], intrinsics)
            }
            Measurements::Rgbd { points } => residual_rgbd_grad(&self.coords[i], h, &points[i]),
        }
    }

    fn gather<T: Copy>(src: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| src[i]).collect()
    }

    /// Solves a pose from a minimal set (P3P+1 for RGB, Kabsch for RGB-D).
    pub fn solve_minimal(&self, idx: &[usize]) -> Result<Pose, SolverError> {
        let scene = Self::gather(self.coords, idx);
        match self.measurements {
            Measurements::Rgb { intrinsics, pixels } => {
                minimal_pnp(&Self::gather(pixels, idx), &scene, intrinsics)
            }
            Measurements::Rgbd { points } => kabsch(&Self::gather(points, idx), &scene),
        }
    }

    /// Solves a pose from an arbitrary subset; RGB uses LM seeded at `init`.
    pub fn solve_subset(
        &self,
        idx: &[usize],
        init: &Pose,
        lm: &LmConfig,
    ) -> Result<Pose, SolverError> {
        let scene = Self::gather(self.coords, idx);
        match self.measurements {
            Measurements::Rgb { intrinsics, pixels } => {
                if idx.len() < 4 {
                    return Err(SolverError::TooFewCorrespondences {
                        required: 4,
                        actual: idx.len(),
                    });
                }
                Ok(pnp_refine_lm(init, &Self::gather(pixels, idx), &scene, intrinsics, lm).pose)
            }
            Measurements::Rgbd { points } => kabsch(&Self::gather(points, idx), &scene),
        }
    }
}

fn check_lengths(left: usize, right: usize, required: usize) -> Result<(), SolverError> {
    if left != right {
        return Err(SolverError::LengthMismatch { left, right });
    }
    if left < required {
        return Err(SolverError::TooFewCorrespondences {
            required,
            actual: left,
        });
    }
    Ok(())
}

/// Relative rank threshold for the Kabsch cross-covariance.
const KABSCH_RANK_TOL: f64 = 1e-9;

pub(crate) fn mean(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Cross-covariance `Σ (e_i - ē)(y_i - ȳ)ᵀ`.
pub(crate) fn cross_covariance(
    camera: &[Vector3<f64>],
    scene: &[Vector3<f64>],
    e_mean: &Vector3<f64>,
    y_mean: &Vector3<f64>,
) -> Matrix3<f64> {
    camera
        .iter()
        .zip(scene)
        .fold(Matrix3::zeros(), |acc, (e, y)| {
            acc + (e - e_mean) * (y - y_mean).transpose()
        })
}

/// Closed-form least-squares rigid alignment: the pose `h` minimizing
/// `Σ |e_i - h⁻¹ y_i|²`, i.e. mapping camera points onto scene points.
pub fn kabsch(camera: &[Vector3<f64>], scene: &[Vector3<f64>]) -> Result<Pose, SolverError> {
    check_lengths(camera.len(), scene.len(), 3)?;
    let e_mean = mean(camera);
    let y_mean = mean(scene);
    let cov = cross_covariance(camera, scene, &e_mean, &y_mean);
    let svd = cov.svd(true, true);
    let s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= KABSCH_RANK_TOL * sorted[0] {
        return Err(SolverError::Degenerate);
    }
    let u = svd.u.ok_or(SolverError::Degenerate)?;
    let v = svd.v_t.ok_or(SolverError::Degenerate)?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut vd = v;
    // the reflection fix flips the singular vector of the smallest singular value
    let smallest = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    vd.column_mut(smallest).scale_mut(d);
    let rotation = vd * u.transpose();
    let pose = Pose::from_matrix(&rotation, Vector3::zeros());
    let translation = y_mean - pose.rotation * e_mean;
    Ok(polish_rigid(Pose::new(pose.rotation, translation), camera, scene))
}

/// Gauss-Newton polish of `Σ ‖R e + t − y‖²` around the closed-form optimum.
fn polish_rigid(pose: Pose, camera: &[Vector3<f64>], scene: &[Vector3<f64>]) -> Pose {
    let cost = |h: &Pose| -> f64 {
        camera
            .iter()
            .zip(scene)
            .map(|(e, y)| (h.apply(e) - y).norm_squared())
            .sum()
    };
    let mut pose = pose;
    let mut current = cost(&pose);
    for _ in 0..3 {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let r_mat = pose.rotation_matrix();
        for (e, y) in camera.iter().zip(scene) {
            let r = pose.apply(e) - y;
            let mut j = Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_mat * skew(e)));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(chol) = jtj.cholesky() else {
            return pose;
        };
        let next = pose.retract(&-chol.solve(&jtr));
        let next_cost = cost(&next);
        if next_cost < current {
            pose = next;
            current = next_cost;
        } else {
            break;
        }
    }
    pose
}

/// Real roots of `c[0] x⁴ + c[1] x³ + c[2] x² + c[3] x + c[4]`.
fn real_quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = c.iter().map(|v| v / scale).collect();
    // drop vanishing leading coefficients
    let first = match c.iter().position(|v| v.abs() > 1e-14) {
        Some(f) => f,
        None => return Vec::new(),
    };
    let poly = &c[first..];
    let degree = poly.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = poly[0];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -poly[j + 1] / lead;
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| poly.iter().fold(0.0, |acc, a| acc * x + a);
    let deriv = |x: f64| {
        poly[..degree]
            .iter()
            .enumerate()
            .fold(0.0, |acc, (k, a)| acc * x + a * (degree - k) as f64)
    };
    let mut roots = Vec::new();
    for z in companion.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let d = deriv(x);
            if d == 0.0 {
                break;
            }
            let step = eval(x) / d;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Candidate camera-frame positions of three world points seen along the
/// unit bearings `f`, by Grunert's quartic.
fn p3p_grunert(f: &[Vector3<f64>; 3], x: &[Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let c2b = c2 / b2;
    let a2b = a2 / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;

    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2b * cos_a * cos_a,
        4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2b * cos_a * cos_a * cos_b),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cos_b * cos_b + 2.0 * bmc * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * bma * cos_g * cos_g),
        4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2b * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g),
        (1.0 + amc).powi(2) - 4.0 * a2b * cos_g * cos_g,
    ];

    let mut out = Vec::new();
    for v in real_quartic_roots(coeffs) {
        let q = 1.0 + v * v - 2.0 * v * cos_b;
        if q <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let s3 = v * s1;
        // s2 from the quadratic c-equation
        let disc = c2 - s1 * s1 * (1.0 - cos_g * cos_g);
        if disc < -1e-9 * c2 {
            continue;
        }
        let root = disc.max(0.0).sqrt();
        let a_err = |s2: f64| (s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a2).abs();
        for s2 in [s1 * cos_g + root, s1 * cos_g - root] {
            if s2 > 0.0 && a_err(s2) <= 1e-6 * a2.max(b2).max(c2) {
                out.push([f[0] * s1, f[1] * s2, f[2] * s3]);
            }
            if root == 0.0 {
                break;
            }
        }
    }
    out
}

/// Gauss-Newton polish of a pose on exactly-determined 2D-3D data.
fn polish_exact(
    pose: Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> Pose {
    let mut pose = pose;
    for _ in 0..3 {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (p, y) in pixels.iter().zip(scene) {
            let cj = camera_point_jacobian(&pose, y);
            let Some(q) = k.project_camera(&cj.point) else {
                return pose;
            };
            let r = p - q;
            let j = -k.projection_jacobian(&cj.point) * cj.d_pose;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(chol) = jtj.cholesky() else {
            return pose;
        };
        let step = -chol.solve(&jtr);
        let next = pose.retract(&step);
        let cost = |h: &Pose| -> f64 {
            pixels
                .iter()
                .zip(scene)
                .map(|(p, y)| residual_rgb(y, h, p, k).powi(2))
                .sum()
        };
        if cost(&next) <= cost(&pose) {
            pose = next;
        } else {
            break;
        }
    }
    pose
}

/// Minimal PnP from four 2D-3D correspondences: P3P on the first three, the
/// fourth picks among the algebraic solutions by its re-projection residual.
pub fn minimal_pnp(
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> Result<Pose, SolverError> {
    check_lengths(pixels.len(), scene.len(), 4)?;
    if pixels.len() != 4 {
        return Err(SolverError::LengthMismatch {
            left: pixels.len(),
            right: 4,
        });
    }
    let x = [scene[0], scene[1], scene[2]];
    let span = (x[1] - x[0]).cross(&(x[2] - x[0])).norm();
    let size = (x[1] - x[0]).norm_squared().max((x[2] - x[0]).norm_squared());
    if !(span > 1e-9 * size) {
        return Err(SolverError::NoSolution);
    }
    let f = [
        k.bearing(&pixels[0]),
        k.bearing(&pixels[1]),
        k.bearing(&pixels[2]),
    ];
    let mut best: Option<(f64, Pose)> = None;
    for cam in p3p_grunert(&f, &x) {
        let Ok(pose) = kabsch(&cam, &x) else {
            continue;
        };
        let pose = polish_exact(pose, &pixels[..3], &x, k);
        if scene.iter().any(|y| pose.to_camera(y).z <= 0.0) {
            continue;
        }
        let r4 = residual_rgb(&scene[3], &pose, &pixels[3], k);
        // strict comparison keeps the lowest-index solution on ties
        if best.as_ref().is_none_or(|(b, _)| r4 < *b) {
            best = Some((r4, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(SolverError::NoSolution)
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub gradient_tol: f64,
    pub step_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_lambda: 1e-3,
            gradient_tol: 1e-9,
            step_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub pose: Pose,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

/// Stacked 2-vector residuals `p_i - π(h⁻¹ y_i)`, their pose Jacobian
/// (2n×6, in the local chart) and the total squared cost.
pub(crate) struct ReprojectionSystem {
    pub jtj: Matrix6<f64>,
    pub jtr: Vector6<f64>,
    pub cost: f64,
}

pub(crate) fn reprojection_system(
    pose: &Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> ReprojectionSystem {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut cost = 0.0;
    for (p, y) in pixels.iter().zip(scene) {
        let cj = camera_point_jacobian(pose, y);
        match k.project_camera(&cj.point) {
            Some(q) => {
                let r = p - q;
                let j = -k.projection_jacobian(&cj.point) * cj.d_pose;
                jtj += j.transpose() * j;
                jtr += j.transpose() * r;
                cost += r.norm_squared();
            }
            None => cost += BEHIND_CAMERA_RESIDUAL * BEHIND_CAMERA_RESIDUAL,
        }
    }
    ReprojectionSystem { jtj, jtr, cost }
}

fn reprojection_cost(
    pose: &Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> f64 {
    pixels
        .iter()
        .zip(scene)
        .map(|(p, y)| residual_rgb(y, pose, p, k).powi(2))
        .sum()
}

/// Minimizes `Σ |p_i - π(h⁻¹ y_i)|²` starting from `init`. The returned pose
/// never has a higher cost than `init`.
pub fn pnp_refine_lm(
    init: &Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
    cfg: &LmConfig,
) -> LmReport {
    let mut pose = *init;
    let mut sys = reprojection_system(&pose, pixels, scene, k);
    let initial_cost = sys.cost;
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        if sys.jtr.amax() < cfg.gradient_tol || sys.cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut damped = sys.jtj;
        for d in 0..6 {
            damped[(d, d)] += lambda * sys.jtj[(d, d)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = -chol.solve(&sys.jtr);
        if step.norm() < cfg.step_tol {
            converged = true;
            break;
        }
        let candidate = pose.retract(&step);
        let cost = reprojection_cost(&candidate, pixels, scene, k);
        if cost < sys.cost {
            pose = candidate;
            sys = reprojection_system(&pose, pixels, scene, k);
            lambda = (lambda * 0.1).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                converged = true;
                break;
            }
        }
    }
    if !converged && sys.jtr.amax() < cfg.gradient_tol {
        converged = true;
    }
    LmReport {
        pose,
        iterations,
        initial_cost,
        final_cost: sys.cost,
        converged,
    }
}

/// Convenience wrapper returning only the summed squared re-projection error.
pub fn reprojection_sse(
    pose: &Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> f64 {
    reprojection_cost(pose, pixels, scene, k)
}
