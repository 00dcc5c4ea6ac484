//! Backward passes through the pose solvers.
//!
//! Upstream gradients are 6-vectors `(∂L/∂ω, ∂L/∂v)` in the local pose chart
//! of [`Pose::retract`]. Outputs are per-coordinate `∂L/∂y_i`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geom::{camera_point_jacobian, Intrinsics, Pose};
use crate::solvers::{cross_covariance, mean, Correspondences, Measurements, SolverError};

/// Singular values closer than this (relative to the largest) make the SVD
/// derivative ill-posed.
pub const SVD_GAP_TOL: f64 = 1e-8;
/// Largest admissible condition number of `JᵀJ` in the PnP backward pass.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradientError {
    #[error("singular values too close for a stable SVD derivative (gap {gap:e}, largest {largest:e})")]
    NearDegenerateSvd { gap: f64, largest: f64 },
    #[error("normal equations are singular (condition {condition:e})")]
    SingularNormalEquations { condition: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `∂h/∂Y` for one solve: a 6×3n matrix whose column block `i` belongs to
/// the `i`-th correspondence of the solved set.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseJacobian {
    pub matrix: DMatrix<f64>,
}

impl PoseJacobian {
    fn from_backward(
        n: usize,
        mut backward: impl FnMut(&Vector6<f64>) -> Result<Vec<Vector3<f64>>, GradientError>,
    ) -> Result<Self, GradientError> {
        let mut matrix = DMatrix::zeros(6, 3 * n);
        for row in 0..6 {
            let mut g = Vector6::zeros();
            g[row] = 1.0;
            for (i, v) in backward(&g)?.iter().enumerate() {
                for c in 0..3 {
                    matrix[(row, 3 * i + c)] = v[c];
                }
            }
        }
        Ok(Self { matrix })
    }

    /// `upstreamᵀ · ∂h/∂Y`, split per coordinate.
    pub fn pullback(&self, upstream: &Vector6<f64>) -> Vec<Vector3<f64>> {
        let row = upstream.transpose() * &self.matrix;
        (0..self.matrix.ncols() / 3)
            .map(|i| Vector3::new(row[3 * i], row[3 * i + 1], row[3 * i + 2]))
            .collect()
    }
}

fn vee_of_skew_part(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Gradient of the Kabsch solution w.r.t. the scene points, by differentiating
/// the SVD of the cross-covariance.
pub fn kabsch_backward(
    camera: &[Vector3<f64>],
    scene: &[Vector3<f64>],
    upstream: &Vector6<f64>,
) -> Result<Vec<Vector3<f64>>, GradientError> {
    if camera.len() != scene.len() {
        return Err(SolverError::LengthMismatch {
            left: camera.len(),
            right: scene.len(),
        }
        .into());
    }
    if camera.len() < 3 {
        return Err(SolverError::TooFewCorrespondences {
            required: 3,
            actual: camera.len(),
        }
        .into());
    }
    let n = camera.len() as f64;
    let e_mean = mean(camera);
    let y_mean = mean(scene);
    let cov = cross_covariance(camera, scene, &e_mean, &y_mean);
    let svd = cov.svd(true, true);
    let s = svd.singular_values;
    let largest = s.max();
    let gap = (0..3)
        .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
        .map(|(i, j)| (s[i] - s[j]).abs())
        .fold(f64::INFINITY, f64::min);
    if !(gap > SVD_GAP_TOL * largest) {
        return Err(GradientError::NearDegenerateSvd { gap, largest });
    }
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let smallest = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    let mut dmat = Matrix3::identity();
    dmat[(smallest, smallest)] = d;
    let rotation = v * dmat * u.transpose();

    // Rotation tangent change φ = vee(Rᵀ dR) caused by a covariance change dH.
    let tangent = |dh: &Matrix3<f64>| -> Vector3<f64> {
        let p = u.transpose() * dh * v;
        let mut om_u = Matrix3::zeros();
        let mut om_v = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let den = s[j] * s[j] - s[i] * s[i];
                om_u[(i, j)] = (s[j] * p[(i, j)] + s[i] * p[(j, i)]) / den;
                om_v[(i, j)] = (s[i] * p[(i, j)] + s[j] * p[(j, i)]) / den;
            }
        }
        let a = dmat * om_v * dmat - om_u;
        vee_of_skew_part(&(u * a * u.transpose()))
    };

    let g_rot = Vector3::new(upstream[0], upstream[1], upstream[2]);
    let g_trans = Vector3::new(upstream[3], upstream[4], upstream[5]);
    // t = ȳ - R ē couples the translation gradient into the rotation
    let g_eff = g_rot - e_mean.cross(&(rotation.transpose() * g_trans));
    let mut g_cov = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut basis = Matrix3::zeros();
            basis[(a, b)] = 1.0;
            g_cov[(a, b)] = g_eff.dot(&tangent(&basis));
        }
    }
    let g_mean = g_trans / n;
    Ok(camera
        .iter()
        .map(|e| g_cov.transpose() * (e - e_mean) + g_mean)
        .collect())
}

/// Per-point blocks of the re-projection system at a pose.
struct ReprojectionBlocks {
    d_pose: Vec<Option<Matrix2x6<f64>>>,
    d_scene: Vec<Option<Matrix2x3<f64>>>,
    normal: Matrix6<f64>,
}

fn reprojection_blocks(
    pose: &Pose,
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
) -> ReprojectionBlocks {
    let mut d_pose = Vec::with_capacity(scene.len());
    let mut d_scene = Vec::with_capacity(scene.len());
    let mut normal = Matrix6::zeros();
    for (_, y) in pixels.iter().zip(scene) {
        let cj = camera_point_jacobian(pose, y);
        if cj.point.z <= 0.0 {
            d_pose.push(None);
            d_scene.push(None);
            continue;
        }
        let dpi = k.projection_jacobian(&cj.point);
        // residual p - π(c)
        let jp = -dpi * cj.d_pose;
        let js = -dpi * cj.d_scene;
        normal += jp.transpose() * jp;
        d_pose.push(Some(jp));
        d_scene.push(Some(js));
    }
    ReprojectionBlocks {
        d_pose,
        d_scene,
        normal,
    }
}

/// Approximate gradient of a converged PnP solve w.r.t. the scene points,
/// `upstreamᵀ · (-J⁺ ∂r/∂Y)` with the last Gauss-Newton step held fixed.
///
/// With exactly three points the system is square and the result is the
/// exact derivative of the P3P solution.
pub fn pnp_backward(
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
    converged: &Pose,
    upstream: &Vector6<f64>,
) -> Result<Vec<Vector3<f64>>, GradientError> {
    if pixels.len() != scene.len() {
        return Err(SolverError::LengthMismatch {
            left: pixels.len(),
            right: scene.len(),
        }
        .into());
    }
    let blocks = reprojection_blocks(converged, pixels, scene, k);
    let eig = SymmetricEigen::new(blocks.normal);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_NORMAL_CONDITION) {
        return Err(GradientError::SingularNormalEquations { condition });
    }
    let chol = blocks
        .normal
        .cholesky()
        .ok_or(GradientError::SingularNormalEquations { condition })?;
    let z = chol.solve(upstream);
    Ok(blocks
        .d_pose
        .iter()
        .zip(&blocks.d_scene)
        .map(|(jp, js)| match (jp, js) {
            (Some(jp), Some(js)) => -(js.transpose() * (jp * z)),
            _ => Vector3::zeros(),
        })
        .collect())
}

pub fn kabsch_jacobian(
    camera: &[Vector3<f64>],
    scene: &[Vector3<f64>],
) -> Result<PoseJacobian, GradientError> {
    PoseJacobian::from_backward(scene.len(), |g| kabsch_backward(camera, scene, g))
}

pub fn pnp_jacobian(
    pixels: &[Vector2<f64>],
    scene: &[Vector3<f64>],
    k: &Intrinsics,
    converged: &Pose,
) -> Result<PoseJacobian, GradientError> {
    PoseJacobian::from_backward(scene.len(), |g| pnp_backward(pixels, scene, k, converged, g))
}

/// Backward through a solve on the correspondence subset `support`. The
/// result has one entry per correspondence of `corrs`; coordinates outside
/// `support` get exactly zero.
///
/// For RGB minimal sets pass only the three P3P points as `support`.
pub fn subset_backward(
    corrs: &Correspondences<'_>,
    support: &[usize],
    pose: &Pose,
    upstream: &Vector6<f64>,
) -> Result<Vec<Vector3<f64>>, GradientError> {
    let scene: Vec<_> = support.iter().map(|&i| corrs.coords()[i]).collect();
    let local = match corrs.measurements() {
        Measurements::Rgbd { points } => {
            let camera: Vec<_> = support.iter().map(|&i| points[i]).collect();
            kabsch_backward(&camera, &scene, upstream)?
        }
        Measurements::Rgb { intrinsics, pixels } => {
            let px: Vec<_> = support.iter().map(|&i| pixels[i]).collect();
            pnp_backward(&px, &scene, intrinsics, pose, upstream)?
        }
    };
    let mut out = vec![Vector3::zeros(); corrs.len()];
    for (&i, g) in support.iter().zip(local) {
        out[i] += g;
    }
    Ok(out)
}

/// Gradient of a refined pose, approximated by differentiating only the last
/// solve on the final inlier set.
pub fn refinement_backward(
    final_inliers: &[usize],
    corrs: &Correspondences<'_>,
    refined: &Pose,
    upstream: &Vector6<f64>,
) -> Result<Vec<Vector3<f64>>, GradientError> {
    subset_backward(corrs, final_inliers, refined, upstream)
}

/// Central-difference Jacobian of `f` at `x`, one column per input.
pub fn finite_diff(
    mut f: impl FnMut(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    eps: f64,
) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        cols.push((plus - minus) / (2.0 * eps));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project;
    use crate::solvers::{kabsch, minimal_pnp, pnp_refine_lm, LmConfig};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::new(
            UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(0.0..3.0)),
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    fn camera_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(2.0..6.0),
                )
            })
            .collect()
    }

    fn random_upstream(rng: &mut impl Rng) -> Vector6<f64> {
        Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    fn flatten(v: &[Vector3<f64>]) -> DVector<f64> {
        DVector::from_iterator(3 * v.len(), v.iter().flat_map(|p| p.iter().copied()))
    }

    fn unflatten(x: &DVector<f64>) -> Vec<Vector3<f64>> {
        (0..x.len() / 3)
            .map(|i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
            .collect()
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    /// `gᵀ · local_difference(h0, solve(Y))` differentiated numerically.
    fn fd_gradient(
        y: &[Vector3<f64>],
        base: &Pose,
        g: &Vector6<f64>,
        eps: f64,
        solve: impl Fn(&[Vector3<f64>]) -> Pose,
    ) -> DVector<f64> {
        let jac = finite_diff(
            |x| {
                let h = solve(&unflatten(x));
                DVector::from_element(1, g.dot(&base.local_difference(&h)))
            },
            &flatten(y),
            eps,
        );
        jac.row(0).transpose()
    }

    #[test]
    fn finite_diff_identity_and_linear() {
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let j = finite_diff(|v| v.clone(), &x, 1e-5);
        assert!((j - DMatrix::identity(3, 3)).amax() < 1e-10);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -3.0, 0.5, 0.0, 4.0]);
        let j = finite_diff(|v| &a * v, &x, 1e-5);
        assert!((j - &a).amax() < 1e-8);
    }

    #[test]
    fn kabsch_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.02).unwrap();
        for trial in 0..100 {
            let truth = random_pose(&mut rng);
            let n = if trial % 4 == 0 { 3 } else { 10 };
            let e = camera_points(&mut rng, n);
            let y: Vec<_> = e
                .iter()
                .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let g = random_upstream(&mut rng);
            let h = kabsch(&e, &y).unwrap();
            let analytic = flatten(&kabsch_backward(&e, &y, &g).unwrap());
            let numeric = fd_gradient(&y, &h, &g, 1e-5, |yy| kabsch(&e, yy).unwrap());
            assert!(rel_err(&analytic, &numeric) < 1e-4, "trial {trial}");
        }
    }

    #[test]
    fn kabsch_backward_zero_upstream_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = camera_points(&mut rng, 6);
        let y = e.clone();
        let out = kabsch_backward(&e, &y, &Vector6::zeros()).unwrap();
        assert!(out.iter().all(|v| *v == Vector3::zeros()));
        let dup = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(
            kabsch_backward(&dup, &dup, &Vector6::repeat(1.0)),
            Err(GradientError::NearDegenerateSvd { .. })
        ));
        // two distinct locations only: rank 1
        let pair: Vec<_> = (0..4)
            .map(|i| Vector3::new((i % 2) as f64, 0.0, 3.0))
            .collect();
        assert!(matches!(
            kabsch_backward(&pair, &pair, &Vector6::repeat(1.0)),
            Err(GradientError::NearDegenerateSvd { .. })
        ));
    }

    #[test]
    fn kabsch_translation_rows_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth = random_pose(&mut rng);
        let e = camera_points(&mut rng, 7);
        let y: Vec<_> = e.iter().map(|p| truth.apply(p) + Vector3::new(0.01, -0.02, 0.0)).collect();
        let jac = kabsch_jacobian(&e, &y).unwrap();
        let fd = finite_diff(
            |x| {
                let h = kabsch(&e, &unflatten(x)).unwrap();
                DVector::from_column_slice(h.translation.as_slice())
            },
            &flatten(&y),
            1e-6,
        );
        // the chart's translation component is plain additive
        let rows = jac.matrix.rows(3, 3).into_owned();
        assert!((rows - fd).amax() < 1e-7);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = random_pose(&mut rng);
        let e = camera_points(&mut rng, 8);
        let y: Vec<_> = e.iter().map(|p| truth.apply(p)).collect();
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let px: Vec<_> = y.iter().map(|p| project(&k, &truth, p).unwrap()).collect();
        for _ in 0..20 {
            let (u1, u2) = (random_upstream(&mut rng), random_upstream(&mut rng));
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let combo = u1 * a + u2 * b;
            let lhs = flatten(&kabsch_backward(&e, &y, &combo).unwrap());
            let rhs = flatten(&kabsch_backward(&e, &y, &u1).unwrap()) * a
                + flatten(&kabsch_backward(&e, &y, &u2).unwrap()) * b;
            assert!((lhs - rhs).amax() < 1e-10);
            let lhs = flatten(&pnp_backward(&px, &y, &k, &truth, &combo).unwrap());
            let rhs = flatten(&pnp_backward(&px, &y, &k, &truth, &u1).unwrap()) * a
                + flatten(&pnp_backward(&px, &y, &k, &truth, &u2).unwrap()) * b;
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    fn pnp_instance(
        rng: &mut impl Rng,
        n: usize,
        sigma: f64,
    ) -> (Pose, Vec<Vector2<f64>>, Vec<Vector3<f64>>, Intrinsics) {
        let k = Intrinsics::new(525.0, 525.0, 320.0, 240.0).unwrap();
        let truth = random_pose(rng);
        let e = camera_points(rng, n);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let y: Vec<_> = e.iter().map(|p| truth.apply(p)).collect();
        let px = y
            .iter()
            .map(|p| {
                let q = project(&k, &truth, p).unwrap();
                if sigma > 0.0 {
                    q + Vector2::new(noise.sample(rng), noise.sample(rng))
                } else {
                    q
                }
            })
            .collect();
        (truth, px, y, k)
    }

    fn tight_lm() -> LmConfig {
        LmConfig {
            max_iters: 200,
            gradient_tol: 1e-12,
            step_tol: 1e-15,
            ..LmConfig::default()
        }
    }

    #[test]
    fn pnp_backward_exact_at_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..30 {
            let (truth, px, y, k) = pnp_instance(&mut rng, 50, 0.0);
            let g = random_upstream(&mut rng);
            let analytic = flatten(&pnp_backward(&px, &y, &k, &truth, &g).unwrap());
            let numeric = fd_gradient(&y, &truth, &g, 1e-5, |yy| {
                pnp_refine_lm(&truth, &px, yy, &k, &tight_lm()).pose
            });
            assert!(rel_err(&analytic, &numeric) < 1e-3, "trial {trial}");
        }
    }

    #[test]
    fn pnp_backward_direction_on_noisy_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..10 {
            let (_, px, y, k) = pnp_instance(&mut rng, 50, 1.0);
            let init = minimal_pnp(&px[..4], &y[..4], &k).unwrap();
            let solve = |yy: &[Vector3<f64>]| pnp_refine_lm(&init, &px, yy, &k, &tight_lm()).pose;
            let converged = solve(&y);
            let g = random_upstream(&mut rng);
            let analytic = flatten(&pnp_backward(&px, &y, &k, &converged, &g).unwrap());
            let numeric = fd_gradient(&y, &converged, &g, 1e-5, solve);
            let cosine = analytic.dot(&numeric) / (analytic.norm() * numeric.norm());
            let ratio = analytic.norm() / numeric.norm();
            assert!(cosine > 0.95, "trial {trial}: cosine {cosine}");
            assert!((0.5..=2.0).contains(&ratio), "trial {trial}: ratio {ratio}");
        }
    }

    #[test]
    fn p3p_backward_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..30 {
            let (_, px, y, k) = pnp_instance(&mut rng, 4, 0.0);
            let h = minimal_pnp(&px, &y, &k).unwrap();
            let g = random_upstream(&mut rng);
            let analytic = flatten(&pnp_backward(&px[..3], &y[..3], &k, &h, &g).unwrap());
            let analytic = analytic.rows(0, 9).into_owned();
            let numeric = fd_gradient(&y, &h, &g, 1e-6, |yy| minimal_pnp(&px, yy, &k).unwrap());
            // the fourth point only disambiguates
            assert!(numeric.rows(9, 3).amax() < 1e-6 * numeric.amax().max(1.0));
            let numeric = numeric.rows(0, 9).into_owned();
            assert!(rel_err(&analytic, &numeric) < 1e-4, "trial {trial}");
        }
    }

    #[test]
    fn pnp_backward_zero_upstream_and_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (truth, px, y, k) = pnp_instance(&mut rng, 10, 0.0);
        let out = pnp_backward(&px, &y, &k, &truth, &Vector6::zeros()).unwrap();
        assert!(out.iter().all(|v| *v == Vector3::zeros()));
        // two points cannot constrain six parameters
        assert!(matches!(
            pnp_backward(&px[..2], &y[..2], &k, &truth, &Vector6::repeat(1.0)),
            Err(GradientError::SingularNormalEquations { .. })
        ));
    }

    #[test]
    fn refinement_backward_routes_only_to_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let truth = random_pose(&mut rng);
        let e = camera_points(&mut rng, 12);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let y: Vec<_> = e
            .iter()
            .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        let meas = Measurements::Rgbd { points: e.clone() };
        let corrs = Correspondences::new(&meas, &y).unwrap();
        let g = random_upstream(&mut rng);

        let all: Vec<usize> = (0..12).collect();
        let h = kabsch(&e, &y).unwrap();
        let full = refinement_backward(&all, &corrs, &h, &g).unwrap();
        assert_eq!(full, kabsch_backward(&e, &y, &g).unwrap());

        let subset = [0usize, 2, 3, 5, 7, 8, 11];
        let sub_e: Vec<_> = subset.iter().map(|&i| e[i]).collect();
        let solve = |yy: &[Vector3<f64>]| {
            let sub_y: Vec<_> = subset.iter().map(|&i| yy[i]).collect();
            kabsch(&sub_e, &sub_y).unwrap()
        };
        let h = solve(&y);
        let grad = refinement_backward(&subset, &corrs, &h, &g).unwrap();
        for i in [1usize, 4, 6, 9, 10] {
            assert_eq!(grad[i], Vector3::zeros());
        }
        let numeric = fd_gradient(&y, &h, &g, 1e-5, solve);
        assert!(rel_err(&flatten(&grad), &numeric) < 1e-4);
    }

    #[test]
    fn jacobian_pullback_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (truth, px, y, k) = pnp_instance(&mut rng, 9, 0.0);
        let jac = pnp_jacobian(&px, &y, &k, &truth).unwrap();
        assert_eq!(jac.matrix.shape(), (6, 27));
        let g = random_upstream(&mut rng);
        let a = flatten(&jac.pullback(&g));
        let b = flatten(&pnp_backward(&px, &y, &k, &truth, &g).unwrap());
        assert!((a - b).amax() < 1e-12);
    }
}
