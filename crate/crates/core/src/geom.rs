//! Rigid poses, pinhole intrinsics, projection and the two residual functions.
//!
//! A [`Pose`] maps camera-frame points to scene-frame points: `y = R e + t`.
//! Local perturbations of a pose use a 6-vector `(ω, v)`: the rotation is
//! right-multiplied by `exp(ω)` and `v` is added to the translation. Every
//! Jacobian in this crate is expressed in that chart.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Matrix4, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual reported for a scene coordinate that lands behind the camera.
///
/// Larger than every pixel validity threshold used by the losses (1000 px).
pub const BEHIND_CAMERA_RESIDUAL: f64 = 10_000.0;

pub type Rotation = UnitQuaternion<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("focal lengths must be positive and finite, got fx={fx}, fy={fy}")]
    InvalidFocal { fx: f64, fy: f64 },
    #[error("principal point must be finite")]
    InvalidPrincipalPoint,
}

/// Camera-to-scene rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    /// Builds a pose from a rotation matrix, re-orthonormalizing it.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        // nearest rotation in the Frobenius sense
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(u * d * vt);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Maps a camera-frame point into the scene frame.
    #[inline]
    pub fn apply(&self, e: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * e + self.translation
    }

    /// Maps a scene-frame point into the camera frame (`h⁻¹ y`).
    #[inline]
    pub fn to_camera(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(y - self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Applies a local increment `(ω, v)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(
            self.rotation * UnitQuaternion::from_scaled_axis(omega),
            self.translation + v,
        )
    }

    /// Inverse of [`Pose::retract`]: the increment taking `self` to `other`.
    pub fn local_difference(&self, other: &Pose) -> Vector6<f64> {
        let omega = (self.rotation.inverse() * other.rotation).scaled_axis();
        let v = other.translation - self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeomError::InvalidFocal { fx, fy });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeomError::InvalidPrincipalPoint);
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` when its depth is not positive.
    #[inline]
    pub fn project_camera(&self, c: &Vector3<f64>) -> Option<Vector2<f64>> {
        if c.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
        ))
    }

    /// Camera-frame point on the ray through `p` at the given depth.
    pub fn backproject(&self, p: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.cx) / self.fx * depth,
            (p.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit-norm viewing ray through `p`.
    pub fn bearing(&self, p: &Vector2<f64>) -> Vector3<f64> {
        self.backproject(p, 1.0).normalize()
    }

    /// `∂π/∂c` at camera point `c` (requires `c.z != 0`).
    #[inline]
    pub fn projection_jacobian(&self, c: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / c.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * c.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * c.y * iz2,
        )
    }
}

/// Projects scene point `y` seen from pose `h`. `None` flags a point behind
/// (or on) the camera plane.
pub fn project(k: &Intrinsics, h: &Pose, y: &Vector3<f64>) -> Option<Vector2<f64>> {
    k.project_camera(&h.to_camera(y))
}

/// Re-projection error in pixels.
pub fn residual_rgb(y: &Vector3<f64>, h: &Pose, p: &Vector2<f64>, k: &Intrinsics) -> f64 {
    match project(k, h, y) {
        Some(q) => (p - q).norm(),
        None => BEHIND_CAMERA_RESIDUAL,
    }
}

/// 3D distance in meters between the observed camera point and `h⁻¹ y`.
pub fn residual_rgbd(y: &Vector3<f64>, h: &Pose, e: &Vector3<f64>) -> f64 {
    (e - h.to_camera(y)).norm()
}

/// Geodesic angle between two rotations, in degrees within `[0, 180]`.
pub fn rotation_angle_deg(a: &Rotation, b: &Rotation) -> f64 {
    let q = a.inverse() * b;
    (2.0 * q.imag().norm().atan2(q.w.abs())).to_degrees()
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Camera point `c = h⁻¹ y` together with `∂c/∂(ω, v)` and `∂c/∂y`.
#[derive(Debug, Clone, Copy)]
pub struct CameraPointJacobian {
    pub point: Vector3<f64>,
    pub d_pose: Matrix3x6<f64>,
    pub d_scene: Matrix3<f64>,
}

pub fn camera_point_jacobian(h: &Pose, y: &Vector3<f64>) -> CameraPointJacobian {
    let rt = h.rotation_matrix().transpose();
    let c = rt * (y - h.translation);
    let mut d_pose = Matrix3x6::zeros();
    d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&c));
    d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    CameraPointJacobian {
        point: c,
        d_pose,
        d_scene: rt,
    }
}

/// A scalar residual with its derivatives w.r.t. the scene point and the pose
/// increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualGrad {
    pub value: f64,
    pub d_scene: Vector3<f64>,
    pub d_pose: Vector6<f64>,
}

impl ResidualGrad {
    fn constant(value: f64) -> Self {
        Self {
            value,
            d_scene: Vector3::zeros(),
            d_pose: Vector6::zeros(),
        }
    }
}

/// [`residual_rgb`] with derivatives. Zero residuals and behind-camera points
/// get zero gradients.
pub fn residual_rgb_grad(
    y: &Vector3<f64>,
    h: &Pose,
    p: &Vector2<f64>,
    k: &Intrinsics,
) -> ResidualGrad {
    let cj = camera_point_jacobian(h, y);
    let Some(q) = k.project_camera(&cj.point) else {
        return ResidualGrad::constant(BEHIND_CAMERA_RESIDUAL);
    };
    let diff = p - q;
    let r = diff.norm();
    if r == 0.0 {
        return ResidualGrad::constant(0.0);
    }
    // r = |p - π(c)|  =>  ∂r/∂c = -(p - π)ᵀ/r · ∂π/∂c
    let dr_dc = -(diff.transpose() / r) * k.projection_jacobian(&cj.point);
    ResidualGrad {
        value: r,
        d_scene: (dr_dc * cj.d_scene).transpose(),
        d_pose: (dr_dc * cj.d_pose).transpose(),
    }
}

/// [`residual_rgbd`] with derivatives.
pub fn residual_rgbd_grad(y: &Vector3<f64>, h: &Pose, e: &Vector3<f64>) -> ResidualGrad {
    let cj = camera_point_jacobian(h, y);
    let diff = cj.point - e;
    let r = diff.norm();
    if r == 0.0 {
        return ResidualGrad::constant(0.0);
    }
    let dr_dc = diff.transpose() / r;
    ResidualGrad {
        value: r,
        d_scene: (dr_dc * cj.d_scene).transpose(),
        d_pose: (dr_dc * cj.d_pose).transpose(),
    }
}

/// Dense scene coordinate prediction, one 3-vector per pixel index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneCoordinateField {
    pub coords: Vec<Vector3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<Vec<Vector3<f64>>>,
}

impl SceneCoordinateField {
    pub fn new(coords: Vec<Vector3<f64>>) -> Self {
        Self { coords, grad: None }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [Vector3<f64>] {
        let n = self.coords.len();
        self.grad.get_or_insert_with(|| vec![Vector3::zeros(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = Vector3::zeros());
        }
    }
}
