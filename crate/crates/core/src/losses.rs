//! Training objectives.
//!
//! Initialization losses act directly on predicted scene coordinates. The
//! pose loss compares a pose to ground truth with translation in centimeters
//! and rotation in degrees weighted by `γ`. The expected loss averages the
//! clamped pose loss over all refined hypotheses of a training-mode estimate.
//!
//! Every loss returns its value together with `dL/dy_i` for every predicted
//! coordinate. At non-smooth points (clamp thresholds, validity boundaries)
//! the below-threshold branch is used.

use nalgebra::{Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::subset_backward;
use crate::geom::{residual_rgb_grad, rotation_angle_deg, Intrinsics, Pose};
use crate::robust::{score_soft_grad, EstimateResult, EstimatorConfig};
use crate::solvers::Correspondences;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("estimate was not produced in training mode")]
    NotTrainMode,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Rotation weight, centimeters per degree.
    pub gamma: f64,
    pub reproj_clamp: f64,
    pub pose_clamp: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub max_reproj: f64,
    pub max_distance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            reproj_clamp: 100.0,
            pose_clamp: 100.0,
            min_depth: 0.1,
            max_depth: 1000.0,
            max_reproj: 1000.0,
            max_distance: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let fields = [
            ("gamma", self.gamma),
            ("reproj_clamp", self.reproj_clamp),
            ("pose_clamp", self.pose_clamp),
            ("min_depth", self.min_depth),
            ("max_depth", self.max_depth),
            ("max_reproj", self.max_reproj),
            ("max_distance", self.max_distance),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.max_depth <= self.min_depth {
            return Err(LossError::InvalidConfig(
                "max_depth must exceed min_depth".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth for one training image. A `None` coordinate marks a pixel
/// without a ground-truth scene coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTarget {
    pub coords: Vec<Option<Vector3<f64>>>,
    pub pose: Pose,
    pub heuristic_depth: f64,
}

impl TrainingTarget {
    pub fn new(coords: Vec<Option<Vector3<f64>>>, pose: Pose) -> Self {
        Self {
            coords,
            pose,
            heuristic_depth: 10.0,
        }
    }

    /// Target with a pose only.
    pub fn pose_only(n: usize, pose: Pose) -> Self {
        Self::new(vec![None; n], pose)
    }

    /// Scene point `h*·ē` for pixel `p` back-projected at the heuristic depth.
    pub fn heuristic(&self, k: &Intrinsics, p: &Vector2<f64>) -> Vector3<f64> {
        self.pose.apply(&k.backproject(p, self.heuristic_depth))
    }
}

/// Which per-pixel term produced a pixel's loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Reprojection,
    Euclidean,
    L1,
    /// Pixel excluded from the loss (no target).
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, Copy)]
struct PixelTerm {
    value: f64,
    grad: Vector3<f64>,
    branch: Branch,
}

impl PixelTerm {
    fn skipped() -> Self {
        Self {
            value: 0.0,
            grad: Vector3::zeros(),
            branch: Branch::Skipped,
        }
    }
}

/// Averages per-pixel terms over the pixels that are not skipped.
fn average(terms: Vec<PixelTerm>) -> LossOutput {
    let counted = terms.iter().filter(|t| t.branch != Branch::Skipped).count();
    let scale = if counted == 0 { 0.0 } else { 1.0 / counted as f64 };
    let value = terms.iter().map(|t| t.value).sum::<f64>() * scale;
    LossOutput {
        value,
        grad: terms.iter().map(|t| t.grad * scale).collect(),
        branches: terms.iter().map(|t| t.branch).collect(),
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), LossError> {
    if expected == actual {
        Ok(())
    } else {
        Err(LossError::LengthMismatch {
            what,
            expected,
            actual,
        })
    }
}

fn euclidean(y: &Vector3<f64>, target: &Vector3<f64>) -> PixelTerm {
    let d = y - target;
    let n = d.norm();
    PixelTerm {
        value: n,
        grad: if n > 0.0 { d / n } else { Vector3::zeros() },
        branch: Branch::Euclidean,
    }
}

fn l1(y: &Vector3<f64>, target: &Vector3<f64>) -> PixelTerm {
    let d = y - target;
    PixelTerm {
        value: d.abs().sum(),
        grad: d.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        branch: Branch::L1,
    }
}

/// Soft clamp `x ↦ x` below `c`, `√(c·x)` above; returns the value and its
/// derivative.
pub fn soft_clamp(x: f64, c: f64) -> (f64, f64) {
    if x <= c {
        (x, 1.0)
    } else {
        let v = (c * x).sqrt();
        (v, 0.5 * v / x)
    }
}

/// Re-projection error of `y` under the ground-truth pose, soft-clamped
/// above `clamp` pixels. Returns the value and `d/dy`.
pub fn soft_clamped_reproj(
    y: &Vector3<f64>,
    truth: &Pose,
    p: &Vector2<f64>,
    k: &Intrinsics,
    clamp: f64,
) -> (f64, Vector3<f64>) {
    let r = residual_rgb_grad(y, truth, p, k);
    let (v, dv) = soft_clamp(r.value, clamp);
    (v, r.d_scene * dv)
}

/// Mean Euclidean distance to the ground-truth coordinates; pixels without a
/// target are excluded from the mean.
pub fn loss_rgbd(
    coords: &[Vector3<f64>],
    targets: &[Option<Vector3<f64>>],
) -> Result<LossOutput, LossError> {
    check_len("targets", coords.len(), targets.len())?;
    let terms = coords
        .par_iter()
        .zip(targets)
        .map(|(y, t)| match t {
            Some(t) => euclidean(y, t),
            None => PixelTerm::skipped(),
        })
        .collect();
    Ok(average(terms))
}

struct Validity {
    depth: f64,
    reproj: f64,
}

fn validity(y: &Vector3<f64>, truth: &Pose, p: &Vector2<f64>, k: &Intrinsics) -> Validity {
    let c = truth.to_camera(y);
    let reproj = match k.project_camera(&c) {
        Some(q) => (p - q).norm(),
        None => f64::INFINITY,
    };
    Validity { depth: c.z, reproj }
}

/// Re-projection loss for predictions that pass the validity checks,
/// Euclidean distance to the ground-truth coordinate otherwise.
///
/// A pixel without a ground-truth coordinate only needs to lie in front of
/// the camera and re-project within `max_reproj`; if it fails, it is pulled
/// towards its heuristic target with the Euclidean distance. The mean runs
/// over all pixels.
pub fn loss_rgb_model(
    coords: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
    target: &TrainingTarget,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    check_len("pixels", coords.len(), pixels.len())?;
    check_len("targets", coords.len(), target.coords.len())?;
    let terms = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let (y, p) = (&coords[i], &pixels[i]);
            let v = validity(y, &target.pose, p, k);
            let mut valid = v.depth >= cfg.min_depth && v.reproj <= cfg.max_reproj;
            if let Some(t) = &target.coords[i] {
                valid &= (y - t).norm() <= cfg.max_distance;
            }
            if valid {
                let (value, grad) = soft_clamped_reproj(y, &target.pose, p, k, cfg.reproj_clamp);
                PixelTerm {
                    value,
                    grad,
                    branch: Branch::Reprojection,
                }
            } else {
                let t = target.coords[i].unwrap_or_else(|| target.heuristic(k, p));
                euclidean(y, &t)
            }
        })
        .collect();
    Ok(average(terms))
}

/// Re-projection loss for predictions with depth in `[min_depth,
/// max_depth]` and re-projection within `max_reproj`; componentwise L1
/// distance to the heuristic target otherwise.
pub fn loss_rgb_only(
    coords: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
    target: &TrainingTarget,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    check_len("pixels", coords.len(), pixels.len())?;
    let terms = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let (y, p) = (&coords[i], &pixels[i]);
            let v = validity(y, &target.pose, p, k);
            let valid = v.depth >= cfg.min_depth
                && v.depth <= cfg.max_depth
                && v.reproj <= cfg.max_reproj;
            if valid {
                let (value, grad) = soft_clamped_reproj(y, &target.pose, p, k, cfg.reproj_clamp);
                PixelTerm {
                    value,
                    grad,
                    branch: Branch::Reprojection,
                }
            } else {
                l1(y, &target.heuristic(k, p))
            }
        })
        .collect();
    Ok(average(terms))
}

/// `100·‖t̂ − t*‖ + γ·∠(R̂, R*)`: translation in centimeters, rotation in
/// degrees.
pub fn pose_loss(est: &Pose, truth: &Pose, gamma: f64) -> f64 {
    100.0 * (est.translation - truth.translation).norm()
        + gamma * rotation_angle_deg(&est.rotation, &truth.rotation)
}

/// [`pose_loss`] and its gradient w.r.t. the increment `δ` of
/// `est.retract(δ)`.
pub fn pose_loss_grad(est: &Pose, truth: &Pose, gamma: f64) -> (f64, Vector6<f64>) {
    let dt = est.translation - truth.translation;
    let tn = dt.norm();
    let phi = (truth.rotation.inverse() * est.rotation).scaled_axis();
    let angle = phi.norm();
    let mut g = Vector6::zeros();
    if angle > 0.0 {
        g.fixed_rows_mut::<3>(0)
            .copy_from(&(phi * (gamma * 180.0 / std::f64::consts::PI / angle)));
    }
    if tn > 0.0 {
        g.fixed_rows_mut::<3>(3).copy_from(&(dt * (100.0 / tn)));
    }
    (100.0 * tn + gamma * angle.to_degrees(), g)
}

pub fn pose_loss_clamped(est: &Pose, truth: &Pose, cfg: &LossConfig) -> f64 {
    soft_clamp(pose_loss(est, truth, cfg.gamma), cfg.pose_clamp).0
}

pub fn pose_loss_clamped_grad(est: &Pose, truth: &Pose, cfg: &LossConfig) -> (f64, Vector6<f64>) {
    let (l, g) = pose_loss_grad(est, truth, cfg.gamma);
    let (v, dv) = soft_clamp(l, cfg.pose_clamp);
    (v, g * dv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLoss {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    /// Clamped pose loss of each refined hypothesis.
    pub losses: Vec<f64>,
    /// Hypotheses whose gradient terms were dropped because a backward pass
    /// was ill-conditioned.
    pub skipped: usize,
}

/// Exact expectation of the clamped pose loss over the hypothesis
/// distribution, with gradient
/// `Σ_j p_j [ℓ_j ∂log p_j/∂Y + ∂ℓ_j/∂Y] = Σ_j α p_j (ℓ_j − E) ∂s_j/∂Y + p_j ∂ℓ_j/∂Y`.
pub fn expected_pose_loss(
    result: &EstimateResult,
    corrs: &Correspondences<'_>,
    truth: &Pose,
    est_cfg: &EstimatorConfig,
    cfg: &LossConfig,
) -> Result<ExpectedLoss, LossError> {
    let probs = result.probabilities.as_ref().ok_or(LossError::NotTrainMode)?;
    let refinements: Option<Vec<_>> = result.refinements.iter().map(|r| r.as_ref()).collect();
    let refinements = refinements.ok_or(LossError::NotTrainMode)?;
    check_len("probabilities", result.hypotheses.len(), probs.len())?;

    let scored: Vec<(f64, Vector6<f64>)> = refinements
        .iter()
        .map(|r| pose_loss_clamped_grad(&r.pose, truth, cfg))
        .collect();
    let losses: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let value: f64 = probs.iter().zip(&losses).map(|(p, l)| p * l).sum();
    let alpha = est_cfg.alpha(corrs.len());

    let terms: Vec<Option<Vec<Vector3<f64>>>> = (0..probs.len())
        .into_par_iter()
        .map(|j| {
            let hyp = &result.hypotheses[j];
            let refinement = refinements[j];
            let mut g = vec![Vector3::zeros(); corrs.len()];
            let w = alpha * probs[j] * (losses[j] - value);
            if w != 0.0 {
                let s = score_soft_grad(corrs, &hyp.pose, est_cfg);
                let via_pose = subset_backward(corrs, hyp.solved_from(), &hyp.pose, &s.d_pose).ok()?;
                for ((gi, d), v) in g.iter_mut().zip(&s.d_scene).zip(&via_pose) {
                    *gi += (d + v) * w;
                }
            }
            let upstream = scored[j].1 * probs[j];
            if upstream != Vector6::zeros() {
                let dl = if refinement.refined {
                    subset_backward(corrs, &refinement.inliers, &refinement.pose, &upstream)
                } else {
                    subset_backward(corrs, hyp.solved_from(), &hyp.pose, &upstream)
                }
                .ok()?;
                for (gi, d) in g.iter_mut().zip(&dl) {
                    *gi += d;
                }
            }
            Some(g)
        })
        .collect();

    let mut grad = vec![Vector3::zeros(); corrs.len()];
    let mut skipped = 0;
    for t in terms {
        match t {
            Some(g) => {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => skipped += 1,
        }
    }
    Ok(ExpectedLoss {
        value,
        grad,
        losses,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project;
    use crate::robust::{estimate, replay, selection_probabilities, SelectionMode};
    use crate::solvers::{Measurements, Mode};
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn truth() -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.05, 0.1, -0.2),
            Vector3::new(0.2, -0.1, 0.3),
        )
    }

    fn fd_check(f: impl Fn(&[Vector3<f64>]) -> f64, y: &[Vector3<f64>], grad: &[Vector3<f64>], tol: f64) {
        let eps = 1e-6;
        for i in 0..y.len() {
            for c in 0..3 {
                let mut p = y.to_vec();
                let mut m = y.to_vec();
                p[i][c] += eps;
                m[i][c] -= eps;
                let num = (f(&p) - f(&m)) / (2.0 * eps);
                let err = (num - grad[i][c]).abs() / (1.0 + num.abs());
                assert!(err < tol, "pixel {i} axis {c}: fd {num} analytic {}", grad[i][c]);
            }
        }
    }

    #[test]
    fn rgbd_loss_cases() {
        let y = vec![Vector3::new(1.0, 2.0, 3.0)];
        let out = loss_rgbd(&y, &[Some(y[0])]).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad[0], Vector3::zeros());
        let out = loss_rgbd(&y, &[Some(y[0] + Vector3::new(0.3, 0.0, 0.4))]).unwrap();
        assert!((out.value - 0.5).abs() < 1e-12);
        // missing targets excluded from the mean
        let y2 = vec![y[0], Vector3::zeros()];
        let out = loss_rgbd(&y2, &[Some(y[0] + Vector3::new(0.3, 0.0, 0.4)), None]).unwrap();
        assert!((out.value - 0.5).abs() < 1e-12);
        assert_eq!(out.branches[1], Branch::Skipped);
        assert!(loss_rgbd(&y, &[]).is_err());
    }

    #[test]
    fn rgbd_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = || Vector3::new(rng.random(), rng.random(), rng.random());
        let y: Vec<_> = (0..8).map(|_| v()).collect();
        let t: Vec<_> = (0..8).map(|i| if i == 3 { None } else { Some(v()) }).collect();
        let out = loss_rgbd(&y, &t).unwrap();
        fd_check(|y| loss_rgbd(y, &t).unwrap().value, &y, &out.grad, 1e-6);
    }

    #[test]
    fn soft_clamp_cases() {
        assert_eq!(soft_clamp(100.0, 100.0).0, 100.0);
        assert_eq!((100.0f64 * 100.0).sqrt(), 100.0);
        assert_eq!(soft_clamp(400.0, 100.0).0, 200.0);
        assert_eq!(soft_clamp(0.0, 100.0).0, 0.0);
        assert_eq!(soft_clamp(10000.0, 100.0).0, 1000.0);
        assert_eq!(soft_clamp(100.0, 100.0).1, 1.0);
    }

    #[test]
    fn soft_clamped_reproj_values_and_gradient() {
        let h = Pose::identity();
        let y = Vector3::new(0.0, 0.0, 2.0);
        let (v, _) = soft_clamped_reproj(&y, &h, &Vector2::new(320.0, 240.0), &k(), 100.0);
        assert_eq!(v, 0.0);
        let (v, _) = soft_clamped_reproj(&y, &h, &Vector2::new(720.0, 240.0), &k(), 100.0);
        assert!((v - 200.0).abs() < 1e-9);
        for target in [Vector2::new(350.0, 200.0), Vector2::new(700.0, 600.0)] {
            let p = [Vector3::new(0.1, -0.2, 2.5)];
            let (_, g) = soft_clamped_reproj(&p[0], &h, &target, &k(), 100.0);
            fd_check(
                |y| soft_clamped_reproj(&y[0], &h, &target, &k(), 100.0).0,
                &p,
                &[g],
                1e-6,
            );
        }
    }

    fn scene_pixel(depth: f64, p: Vector2<f64>) -> Vector3<f64> {
        truth().apply(&k().backproject(&p, depth))
    }

    #[test]
    fn rgb_model_branches() {
        let cfg = LossConfig::default();
        let p = Vector2::new(300.0, 260.0);
        let ystar = scene_pixel(3.0, p);
        // at the target: valid, zero loss
        let t = TrainingTarget::new(vec![Some(ystar)], truth());
        let out = loss_rgb_model(&[ystar], &[p], &k(), &t, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Reprojection);
        assert!(out.value < 1e-9);

        // behind the camera
        let behind = truth().apply(&Vector3::new(0.0, 0.0, -1.0));
        let out = loss_rgb_model(&[behind], &[p], &k(), &t, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Euclidean);
        assert!((out.value - (behind - ystar).norm()).abs() < 1e-12);

        // 0.2 m along a ray through a pixel 5 px away
        let q = p + Vector2::new(3.0, 4.0);
        let off = scene_pixel(3.2, q);
        assert!((off - ystar).norm() > 0.1);
        let out = loss_rgb_model(&[off], &[p], &k(), &t, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Euclidean);

        // without a target the same point is valid
        let t_none = TrainingTarget::pose_only(1, truth());
        let out = loss_rgb_model(&[off], &[p], &k(), &t_none, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Reprojection);
        assert!((out.value - 5.0).abs() < 1e-6);
        // and behind the camera it is pulled to the heuristic target
        let out = loss_rgb_model(&[behind], &[p], &k(), &t_none, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Euclidean);
    }

    #[test]
    fn rgb_only_branches() {
        let cfg = LossConfig::default();
        let p = Vector2::new(100.0, 400.0);
        let t = TrainingTarget::pose_only(1, truth());
        let ybar = t.heuristic(&k(), &p);
        assert!((project(&k(), &truth(), &ybar).unwrap() - p).norm() < 1e-9);
        let out = loss_rgb_only(&[ybar], &[p], &k(), &t, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::Reprojection);
        assert!(out.value < 1e-9);
        let far = scene_pixel(2000.0, p);
        let out = loss_rgb_only(&[far], &[p], &k(), &t, &cfg).unwrap();
        assert_eq!(out.branches[0], Branch::L1);
        assert!((out.value - (far - ybar).abs().sum()).abs() < 1e-6);
    }

    #[test]
    fn rgb_losses_gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let pixels: Vec<_> = (0..n)
            .map(|_| Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let targets: Vec<_> = pixels
            .iter()
            .map(|p| Some(scene_pixel(rng.random_range(1.0..5.0), *p)))
            .collect();
        // mix of valid, far-off, behind and very distant predictions
        let coords: Vec<_> = (0..n)
            .map(|i| {
                let t = targets[i].unwrap();
                let jitter = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                match i % 4 {
                    0 => t + jitter * 0.03,
                    1 => t + jitter * 2.0,
                    2 => truth().apply(&Vector3::new(jitter.x, jitter.y, -1.0)),
                    _ => scene_pixel(3000.0, pixels[i]) + jitter,
                }
            })
            .collect();
        let t = TrainingTarget::new(targets, truth());
        let out = loss_rgb_model(&coords, &pixels, &k(), &t, &cfg).unwrap();
        assert!(out.branches.contains(&Branch::Reprojection));
        assert!(out.branches.contains(&Branch::Euclidean));
        fd_check(|y| loss_rgb_model(y, &pixels, &k(), &t, &cfg).unwrap().value, &coords, &out.grad, 1e-6);

        let t = TrainingTarget::pose_only(n, truth());
        let out = loss_rgb_only(&coords, &pixels, &k(), &t, &cfg).unwrap();
        assert!(out.branches.contains(&Branch::Reprojection));
        assert!(out.branches.contains(&Branch::L1));
        fd_check(|y| loss_rgb_only(y, &pixels, &k(), &t, &cfg).unwrap().value, &coords, &out.grad, 1e-6);
    }

    #[test]
    fn pose_loss_cases() {
        let h = truth();
        assert!(pose_loss(&h, &h, 100.0) < 1e-12);
        let rot = Pose::new(
            h.rotation * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 1f64.to_radians()),
            h.translation,
        );
        assert!((pose_loss(&rot, &h, 100.0) - 100.0).abs() < 1e-9);
        let tr = Pose::new(h.rotation, h.translation + Vector3::new(0.1, 0.0, 0.0));
        assert!((pose_loss(&tr, &h, 100.0) - 10.0).abs() < 1e-9);
        let cfg = LossConfig::default();
        assert!((pose_loss_clamped(&rot, &h, &cfg) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pose_loss_gradient() {
        let cfg = LossConfig::default();
        let h = truth();
        for (scale, clamp) in [(0.002, false), (0.2, true)] {
            let est = h.retract(&Vector6::new(0.3, -0.2, 0.1, 0.5, 0.2, -0.4).scale(scale));
            let (v, g) = pose_loss_clamped_grad(&est, &h, &cfg);
            assert_eq!(v > cfg.pose_clamp, clamp);
            let eps = 1e-7;
            for d in 0..6 {
                let mut delta = Vector6::zeros();
                delta[d] = eps;
                let num = (pose_loss_clamped(&est.retract(&delta), &h, &cfg)
                    - pose_loss_clamped(&est.retract(&(-delta)), &h, &cfg))
                    / (2.0 * eps);
                assert!((num - g[d]).abs() <= 1e-6 * (1.0 + num.abs()), "dim {d}: {num} vs {}", g[d]);
            }
        }
    }

    proptest! {
        #[test]
        fn pose_loss_nonnegative(a in prop::array::uniform6(-1.0f64..1.0), b in prop::array::uniform6(-1.0f64..1.0)) {
            let ha = Pose::identity().retract(&Vector6::from_row_slice(&a));
            let hb = Pose::identity().retract(&Vector6::from_row_slice(&b));
            prop_assert!(pose_loss(&ha, &hb, 100.0) >= 0.0);
            prop_assert!(pose_loss_clamped(&ha, &hb, &LossConfig::default()) >= 0.0);
        }

        #[test]
        fn clamp_is_monotone(x in 0.0f64..1e6, d in 0.0f64..1e3) {
            prop_assert!(soft_clamp(x + d, 100.0).0 >= soft_clamp(x, 100.0).0);
        }
    }

    fn rgbd_scene(n: usize, seed: u64) -> (Measurements, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut coords = Vec::new();
        for i in 0..n {
            let e = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0));
            let mut y = truth().apply(&e);
            y += Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                * if i % 5 == 0 { 0.8 } else { 0.03 };
            points.push(e);
            coords.push(y);
        }
        (Measurements::Rgbd { points }, coords)
    }

    #[test]
    fn expected_loss_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<_> = (0..60)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..4.0)))
            .collect();
        let coords: Vec<_> = points.iter().map(|e| truth().apply(e)).collect();
        let meas = Measurements::Rgbd { points };
        let corrs = Correspondences::new(&meas, &coords).unwrap();
        let est_cfg = EstimatorConfig {
            hypotheses: 8,
            ..EstimatorConfig::for_mode(Mode::Rgbd)
        };
        let r = estimate(&corrs, &est_cfg, SelectionMode::Train, 1).unwrap();
        let e = expected_pose_loss(&r, &corrs, &truth(), &est_cfg, &LossConfig::default()).unwrap();
        assert!(e.value < 1e-6);
        // ℓ_j ≈ E for every j, so the score term carries no weight
        let alpha = est_cfg.alpha(corrs.len());
        let p = r.probabilities.as_ref().unwrap();
        for (pj, lj) in p.iter().zip(&e.losses) {
            assert!((alpha * pj * (lj - e.value)).abs() < 1e-6);
        }

        let test = estimate(&corrs, &est_cfg, SelectionMode::Test, 1).unwrap();
        assert_eq!(
            expected_pose_loss(&test, &corrs, &truth(), &est_cfg, &LossConfig::default()),
            Err(LossError::NotTrainMode)
        );
    }

    #[test]
    fn expected_loss_single_hypothesis() {
        let (meas, coords) = rgbd_scene(80, 4);
        let corrs = Correspondences::new(&meas, &coords).unwrap();
        let est_cfg = EstimatorConfig {
            hypotheses: 1,
            ..EstimatorConfig::for_mode(Mode::Rgbd)
        };
        let cfg = LossConfig::default();
        let r = estimate(&corrs, &est_cfg, SelectionMode::Train, 2).unwrap();
        let e = expected_pose_loss(&r, &corrs, &truth(), &est_cfg, &cfg).unwrap();
        let direct = pose_loss_clamped(&r.refinements[0].as_ref().unwrap().pose, &truth(), &cfg);
        assert!((e.value - direct).abs() < 1e-12);
    }

    #[test]
    fn expected_loss_is_convex_combination() {
        for seed in 0..5 {
            let (meas, coords) = rgbd_scene(100, 10 + seed);
            let corrs = Correspondences::new(&meas, &coords).unwrap();
            let est_cfg = EstimatorConfig {
                hypotheses: 16,
                ..EstimatorConfig::for_mode(Mode::Rgbd)
            };
            let r = estimate(&corrs, &est_cfg, SelectionMode::Train, seed).unwrap();
            let e = expected_pose_loss(&r, &corrs, &truth(), &est_cfg, &LossConfig::default()).unwrap();
            let lo = e.losses.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - 1e-9 <= e.value && e.value <= hi + 1e-9);
        }
    }

    /// Expected loss recomputed from scratch with every discrete choice of
    /// `r` held fixed.
    fn frozen_expected_loss(
        meas: &Measurements,
        coords: &[Vector3<f64>],
        r: &EstimateResult,
        est_cfg: &EstimatorConfig,
        cfg: &LossConfig,
    ) -> f64 {
        let corrs = Correspondences::new(meas, coords).unwrap();
        let rep = replay(&corrs, &r.frozen().unwrap(), est_cfg).unwrap();
        let p = selection_probabilities(&rep.scores, est_cfg.alpha(coords.len()));
        p.iter()
            .zip(&rep.refined)
            .map(|(p, h)| p * pose_loss_clamped(h, &truth(), cfg))
            .sum()
    }

    #[test]
    fn expected_loss_gradient_matches_frozen_finite_differences() {
        let (meas, coords) = rgbd_scene(40, 21);
        let corrs = Correspondences::new(&meas, &coords).unwrap();
        let est_cfg = EstimatorConfig {
            hypotheses: 6,
            ..EstimatorConfig::for_mode(Mode::Rgbd)
        };
        let cfg = LossConfig::default();
        let r = estimate(&corrs, &est_cfg, SelectionMode::Train, 3).unwrap();
        let e = expected_pose_loss(&r, &corrs, &truth(), &est_cfg, &cfg).unwrap();
        assert_eq!(e.skipped, 0);
        let base = frozen_expected_loss(&meas, &coords, &r, &est_cfg, &cfg);
        assert!((base - e.value).abs() < 1e-9);

        let eps = 1e-6;
        let mut num = Vec::new();
        for i in 0..coords.len() {
            let mut g = Vector3::zeros();
            for c in 0..3 {
                let mut p = coords.clone();
                let mut m = coords.clone();
                p[i][c] += eps;
                m[i][c] -= eps;
                g[c] = (frozen_expected_loss(&meas, &p, &r, &est_cfg, &cfg)
                    - frozen_expected_loss(&meas, &m, &r, &est_cfg, &cfg))
                    / (2.0 * eps);
            }
            num.push(g);
        }
        let diff: f64 = num.iter().zip(&e.grad).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        assert!(diff / norm < 1e-3, "relative error {}", diff / norm);
    }
}
