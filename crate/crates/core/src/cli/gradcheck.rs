//! Finite-difference checks of every analytic gradient.
//!
//! Each check draws seeded random instances, compares the analytic gradient
//! with central differences and records the worst relative error
//! `‖g_num − g_ana‖ / max(‖g_num‖, ‖g_ana‖)`. The PnP direction check records
//! `1 − cos` between the two instead.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::data::derive_seed;
use crate::autodiff::{kabsch_backward, pnp_backward};
use crate::geom::{Intrinsics, Pose};
use crate::losses::{
    expected_pose_loss, loss_rgb_model, loss_rgb_only, loss_rgbd, pose_loss_clamped, pose_loss_clamped_grad,
    soft_clamped_reproj, LossConfig, TrainingTarget,
};
use crate::regressor::Mlp;
use crate::robust::{estimate, replay, score_soft, score_soft_grad, selection_probabilities, EstimatorConfig, SelectionMode};
use crate::solvers::{kabsch, minimal_pnp, pnp_refine_lm, Correspondences, LmConfig, Measurements, Mode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub const GRADIENT_TOL: f64 = 1e-4;
pub const EXPECTED_LOSS_TOL: f64 = 1e-3;
pub const PNP_EXACT_TOL: f64 = 1e-3;
/// `1 − cos` bound, i.e. cosine above 0.95, with magnitudes within a factor 2.
pub const PNP_COSINE_TOL: f64 = 0.05;

const EPS: f64 = 1e-6;

/// Negates every other component: a gradient bug that both relative-error
/// and direction checks must catch.
fn corrupt(g: &mut [f64]) {
    for v in g.iter_mut().step_by(2) {
        *v = -*v;
    }
}

fn rel_error(num: &[f64], ana: &[f64]) -> f64 {
    let diff: f64 = num.iter().zip(ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n1: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = n1.max(n2);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// `1 − cos` between the two gradients, or 1 when their magnitude ratio
/// leaves `[0.5, 2]`.
fn direction_error(num: &[f64], ana: &[f64]) -> f64 {
    let dot: f64 = num.iter().zip(ana).map(|(a, b)| a * b).sum();
    let n1: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(0.5..=2.0).contains(&(n2 / n1)) {
        return 1.0;
    }
    1.0 - dot / (n1 * n2)
}

fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Central differences of a scalar function of a point list.
fn fd_points(y: &[Vector3<f64>], mut f: impl FnMut(&[Vector3<f64>]) -> f64) -> Vec<f64> {
    let mut probe = y.to_vec();
    let mut out = Vec::with_capacity(3 * y.len());
    for i in 0..y.len() {
        for c in 0..3 {
            probe[i][c] = y[i][c] + EPS;
            let fp = f(&probe);
            probe[i][c] = y[i][c] - EPS;
            let fm = f(&probe);
            probe[i][c] = y[i][c];
            out.push((fp - fm) / (2.0 * EPS));
        }
    }
    out
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    Pose::new(
        UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
        Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
    )
}

fn random_upstream(rng: &mut impl Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0))
}

fn camera_point(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(2.0..6.0))
}

fn intrinsics() -> Intrinsics {
    Intrinsics::new(500.0, 500.0, 320.0, 240.0).expect("valid")
}

struct Check {
    name: &'static str,
    tolerance: f64,
    run: fn(&mut ChaCha8Rng, bool) -> f64,
}

fn check_kabsch(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let truth = random_pose(rng);
    let n = rng.random_range(3..=12);
    let noise = Normal::new(0.0, 0.02).expect("valid");
    let e: Vec<_> = (0..n).map(|_| camera_point(rng)).collect();
    let y: Vec<_> = e
        .iter()
        .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| noise.sample(rng)))
        .collect();
    let g = random_upstream(rng);
    let h0 = kabsch(&e, &y).expect("non-degenerate");
    let mut ana = flatten(&kabsch_backward(&e, &y, &g).expect("well separated"));
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| g.dot(&h0.local_difference(&kabsch(&e, yy).expect("solvable"))));
    rel_error(&num, &ana)
}

fn tight_lm() -> LmConfig {
    LmConfig {
        max_iters: 200,
        gradient_tol: 1e-12,
        step_tol: 1e-15,
        ..LmConfig::default()
    }
}

fn pnp_instance(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> (Pose, Vec<Vector2<f64>>, Vec<Vector3<f64>>) {
    let truth = random_pose(rng);
    let k = intrinsics();
    let noise = Normal::new(0.0, sigma.max(1e-300)).expect("valid");
    let mut px = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = camera_point(rng);
        let mut p = k.project_camera(&c).expect("in front");
        if sigma > 0.0 {
            p += Vector2::new(noise.sample(rng), noise.sample(rng));
        }
        px.push(p);
        y.push(truth.apply(&c));
    }
    (truth, px, y)
}

fn check_pnp_exact(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let (truth, px, y) = pnp_instance(rng, 20, 0.0);
    let k = intrinsics();
    let g = random_upstream(rng);
    let mut ana = flatten(&pnp_backward(&px, &y, &k, &truth, &g).expect("well conditioned"));
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| g.dot(&truth.local_difference(&pnp_refine_lm(&truth, &px, yy, &k, &tight_lm()).pose)));
    rel_error(&num, &ana)
}

fn check_pnp_noisy(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let (truth, px, y) = pnp_instance(rng, 50, 1.0);
    let k = intrinsics();
    let init = minimal_pnp(&px[..4], &y[..4], &k).unwrap_or(truth);
    let converged = pnp_refine_lm(&init, &px, &y, &k, &tight_lm()).pose;
    let g = random_upstream(rng);
    let mut ana = flatten(&pnp_backward(&px, &y, &k, &converged, &g).expect("well conditioned"));
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| {
        g.dot(&converged.local_difference(&pnp_refine_lm(&converged, &px, yy, &k, &tight_lm()).pose))
    });
    direction_error(&num, &ana)
}

fn check_score(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let truth = random_pose(rng);
    let n = 30;
    let rgb = rng.random_bool(0.5);
    let k = intrinsics();
    let mut cam = Vec::new();
    let mut px = Vec::new();
    let mut y = Vec::new();
    let spread = if rgb { 0.05 } else { 0.1 };
    for _ in 0..n {
        let c = camera_point(rng);
        cam.push(c);
        px.push(k.project_camera(&c).expect("in front"));
        let off = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        y.push(truth.apply(&c) + off * spread);
    }
    let (meas, cfg) = if rgb {
        (Measurements::Rgb { intrinsics: k, pixels: px }, EstimatorConfig::for_mode(Mode::Rgb))
    } else {
        (Measurements::Rgbd { points: cam }, EstimatorConfig::for_mode(Mode::Rgbd))
    };
    let corrs = Correspondences::new(&meas, &y).expect("sizes match");
    let g = score_soft_grad(&corrs, &truth, &cfg);
    let mut ana = flatten(&g.d_scene);
    ana.extend(g.d_pose.iter());
    if fault {
        corrupt(&mut ana);
    }
    let mut num = fd_points(&y, |yy| score_soft(&Correspondences::new(&meas, yy).expect("sizes match"), &truth, &cfg));
    for d in 0..6 {
        let mut delta = Vector6::zeros();
        delta[d] = EPS;
        num.push(
            (score_soft(&corrs, &truth.retract(&delta), &cfg) - score_soft(&corrs, &truth.retract(&(-delta)), &cfg))
                / (2.0 * EPS),
        );
    }
    rel_error(&num, &ana)
}

fn check_loss_rgbd(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let n = 20;
    let y: Vec<_> = (0..n).map(|_| camera_point(rng)).collect();
    let t: Vec<_> = (0..n)
        .map(|i| (i % 7 != 3).then(|| camera_point(rng)))
        .collect();
    let mut ana = flatten(&loss_rgbd(&y, &t).expect("sizes match").grad);
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| loss_rgbd(yy, &t).expect("sizes match").value);
    rel_error(&num, &ana)
}

/// Pixels, ground truth and predictions spread over every validity branch.
fn rgb_loss_instance(rng: &mut ChaCha8Rng) -> (Vec<Vector2<f64>>, TrainingTarget, Vec<Vector3<f64>>) {
    let truth = random_pose(rng);
    let k = intrinsics();
    let n = 20;
    let mut px = Vec::new();
    let mut targets = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let p = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let t = truth.apply(&k.backproject(&p, rng.random_range(1.0..8.0)));
        let j = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pred = match i % 5 {
            0 => t + j * 0.03,
            1 => t + j * 3.0,
            2 => truth.apply(&Vector3::new(j.x, j.y, -1.0 + 0.5 * j.z)),
            3 => truth.apply(&k.backproject(&p, 2500.0)) + j,
            _ => t + j * 0.3,
        };
        px.push(p);
        targets.push((i % 4 != 1).then_some(t));
        y.push(pred);
    }
    (px, TrainingTarget::new(targets, truth), y)
}

fn check_loss_rgb_model(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let (px, target, y) = rgb_loss_instance(rng);
    let (k, cfg) = (intrinsics(), LossConfig::default());
    let mut ana = flatten(&loss_rgb_model(&y, &px, &k, &target, &cfg).expect("sizes match").grad);
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| loss_rgb_model(yy, &px, &k, &target, &cfg).expect("sizes match").value);
    rel_error(&num, &ana)
}

fn check_loss_rgb_only(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let (px, target, y) = rgb_loss_instance(rng);
    let target = TrainingTarget::pose_only(y.len(), target.pose);
    let (k, cfg) = (intrinsics(), LossConfig::default());
    let mut ana = flatten(&loss_rgb_only(&y, &px, &k, &target, &cfg).expect("sizes match").grad);
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| loss_rgb_only(yy, &px, &k, &target, &cfg).expect("sizes match").value);
    rel_error(&num, &ana)
}

fn check_reproj_clamp(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let truth = random_pose(rng);
    let k = intrinsics();
    let y = [truth.apply(&camera_point(rng))];
    let p = Vector2::new(rng.random_range(-400.0..1000.0), rng.random_range(-400.0..900.0));
    let (_, g) = soft_clamped_reproj(&y[0], &truth, &p, &k, 100.0);
    let mut ana = vec![g.x, g.y, g.z];
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| soft_clamped_reproj(&yy[0], &truth, &p, &k, 100.0).0);
    rel_error(&num, &ana)
}

fn check_pose_loss(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let truth = random_pose(rng);
    let scale = if rng.random_bool(0.5) { 0.01 } else { 0.3 };
    let est = truth.retract(&(random_upstream(rng) * scale));
    let cfg = LossConfig::default();
    let (_, g) = pose_loss_clamped_grad(&est, &truth, &cfg);
    let mut ana: Vec<f64> = g.iter().copied().collect();
    if fault {
        corrupt(&mut ana);
    }
    let num: Vec<f64> = (0..6)
        .map(|d| {
            let mut delta = Vector6::zeros();
            delta[d] = EPS;
            (pose_loss_clamped(&est.retract(&delta), &truth, &cfg)
                - pose_loss_clamped(&est.retract(&(-delta)), &truth, &cfg))
                / (2.0 * EPS)
        })
        .collect();
    rel_error(&num, &ana)
}

/// 30 correspondences, every fifth a gross outlier. RGB-D inliers carry up to
/// 3 cm of noise. RGB inliers are noiseless and the returned loss target is
/// the generating pose offset by up to 2e-2 rad / 5 cm.
fn expected_loss_instance(rng: &mut ChaCha8Rng, rgb: bool) -> (Pose, Measurements, Vec<Vector3<f64>>) {
    let truth = random_pose(rng);
    let k = intrinsics();
    let n = 30;
    let mut cam = Vec::new();
    let mut px = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = camera_point(rng);
        let p = k.project_camera(&c).expect("in front");
        let mut jitter = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let yi = if i % 5 == 0 {
            // RGB outliers re-project more than 50 px away
            loop {
                let cand = truth.apply(&c) + jitter();
                let back = truth.inverse().apply(&cand);
                let reproj = k.project_camera(&back).map(|q| (q - p).norm());
                if !rgb || back.z < 0.1 || reproj.is_none_or(|d| d > 50.0) {
                    break cand;
                }
            }
        } else if rgb {
            truth.apply(&c)
        } else {
            truth.apply(&c) + jitter() * 0.03
        };
        cam.push(c);
        px.push(p);
        y.push(yi);
    }
    let meas = if rgb {
        Measurements::Rgb { intrinsics: k, pixels: px }
    } else {
        Measurements::Rgbd { points: cam }
    };
    let target = if rgb {
        let offset = Vector6::from_fn(|i, _| rng.random_range(-1.0..1.0) * if i < 3 { 0.02 } else { 0.05 });
        truth.retract(&offset)
    } else {
        truth
    };
    (target, meas, y)
}

fn check_expected_loss(rng: &mut ChaCha8Rng, fault: bool, rgb: bool) -> f64 {
    let (truth, meas, y) = expected_loss_instance(rng, rgb);
    let mode = if rgb { Mode::Rgb } else { Mode::Rgbd };
    let est_cfg = EstimatorConfig {
        hypotheses: 6,
        lm: tight_lm(),
        ..EstimatorConfig::for_mode(mode)
    };
    let cfg = LossConfig::default();
    let corrs = Correspondences::new(&meas, &y).expect("sizes match");
    let seed = rng.random();
    let Ok(result) = estimate(&corrs, &est_cfg, SelectionMode::Train, seed) else {
        // draw a fresh instance
        return check_expected_loss(rng, fault, rgb);
    };
    let e = expected_pose_loss(&result, &corrs, &truth, &est_cfg, &cfg).expect("train mode");
    let frozen = result.frozen().expect("train mode");
    let mut ana = flatten(&e.grad);
    if fault {
        corrupt(&mut ana);
    }
    let num = fd_points(&y, |yy| {
        let corrs = Correspondences::new(&meas, yy).expect("sizes match");
        let Ok(rep) = replay(&corrs, &frozen, &est_cfg) else {
            return f64::NAN;
        };
        let p = selection_probabilities(&rep.scores, est_cfg.alpha(yy.len()));
        p.iter().zip(&rep.refined).map(|(p, h)| p * pose_loss_clamped(h, &truth, &cfg)).sum()
    });
    rel_error(&num, &ana)
}

fn check_expected_loss_rgbd(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    check_expected_loss(rng, fault, false)
}

fn check_expected_loss_rgb(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    check_expected_loss(rng, fault, true)
}

fn check_regressor(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    // random biases too
    let mut layers = Mlp::new(&[6, 8, 8, 3], rng.random()).expect("valid sizes").layers().to_vec();
    for l in &mut layers {
        l.bias.apply(|b| *b = rng.random_range(-0.5..0.5));
    }
    let mlp = Mlp::from_layers(layers).expect("same shapes");
    let n = 4;
    let x = DMatrix::from_fn(6, n, |_, _| rng.random_range(-1.0..1.0));
    let u: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let objective = |m: &Mlp, x: &DMatrix<f64>| -> f64 {
        m.predict(x).expect("shapes match").iter().zip(&u).map(|(y, u)| y.dot(u)).sum()
    };
    let cache = mlp.forward(&x).expect("shapes match");
    let g = mlp.backward(&cache, &u).expect("fresh cache");
    let mut ana: Vec<f64> = Vec::new();
    for l in &g.layers {
        ana.extend(l.weight.iter());
        ana.extend(l.bias.iter());
    }
    ana.extend(g.input.iter());
    if fault {
        corrupt(&mut ana);
    }

    let mut num = Vec::with_capacity(ana.len());
    let params: Vec<(usize, bool, usize)> = mlp
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            (0..l.weight.len())
                .map(move |k| (li, true, k))
                .chain((0..l.bias.len()).map(move |k| (li, false, k)))
        })
        .collect();
    let layers = mlp.layers().to_vec();
    for (li, is_weight, k) in params {
        let eval = |delta: f64| {
            let mut ls = layers.clone();
            if is_weight {
                ls[li].weight[k] += delta;
            } else {
                ls[li].bias[k] += delta;
            }
            objective(&Mlp::from_layers(ls).expect("same shapes"), &x)
        };
        num.push((eval(EPS) - eval(-EPS)) / (2.0 * EPS));
    }
    let flat = DVector::from_column_slice(x.as_slice());
    for k in 0..flat.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p[k] += EPS;
        m[k] -= EPS;
        num.push((objective(&mlp, &p) - objective(&mlp, &m)) / (2.0 * EPS));
    }
    rel_error(&num, &ana)
}

const CHECKS: &[Check] = &[
    Check { name: "kabsch_backward", tolerance: GRADIENT_TOL, run: check_kabsch },
    Check { name: "pnp_backward_zero_residual", tolerance: PNP_EXACT_TOL, run: check_pnp_exact },
    Check { name: "pnp_backward_noisy_direction", tolerance: PNP_COSINE_TOL, run: check_pnp_noisy },
    Check { name: "score_soft", tolerance: GRADIENT_TOL, run: check_score },
    Check { name: "loss_rgbd", tolerance: GRADIENT_TOL, run: check_loss_rgbd },
    Check { name: "loss_rgb_model", tolerance: GRADIENT_TOL, run: check_loss_rgb_model },
    Check { name: "loss_rgb_only", tolerance: GRADIENT_TOL, run: check_loss_rgb_only },
    Check { name: "soft_clamped_reproj", tolerance: GRADIENT_TOL, run: check_reproj_clamp },
    Check { name: "pose_loss_clamped", tolerance: GRADIENT_TOL, run: check_pose_loss },
    Check { name: "expected_pose_loss_rgbd", tolerance: EXPECTED_LOSS_TOL, run: check_expected_loss_rgbd },
    Check { name: "expected_pose_loss_rgb", tolerance: EXPECTED_LOSS_TOL, run: check_expected_loss_rgb },
    Check { name: "regressor_backward", tolerance: GRADIENT_TOL, run: check_regressor },
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs every check on `instances` seeded instances. With `inject_fault`
/// the analytic gradients are corrupted before comparison.
pub fn run_checks(seed: u64, instances: usize, inject_fault: bool) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(ci, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + ci as u64));
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let err = (check.run)(&mut rng, inject_fault);
                // NaN must register as a failure
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            CheckResult {
                name: check.name,
                instances,
                max_error: worst,
                tolerance: check.tolerance,
            }
        })
        .collect()
}

pub fn report_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("check,instances,max_error,tolerance,pass\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{:e},{:e},{}\n",
            r.name,
            r.instances,
            r.max_error,
            r.tolerance,
            r.passed()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_pass_and_faults_are_caught() {
        let clean = run_checks(1, 3, false);
        for r in &clean {
            assert!(r.passed(), "{r:?}");
        }
        let faulty = run_checks(1, 3, true);
        for r in &faulty {
            assert!(!r.passed(), "{r:?}");
        }
        assert_eq!(report_csv(&clean), report_csv(&run_checks(1, 3, false)));
    }
}
