//! Synthetic scenes, camera trajectories and rendered observations.
//!
//! A scene is a point cloud inside an axis-aligned cube centered at the
//! origin. Every point carries a random unit descriptor. Rendering projects
//! the visible points into a pinhole camera and records, per pixel, the
//! (jittered) descriptor, the noisy pixel, the noisy camera-frame point and
//! the ground-truth scene coordinate. A fixed fraction of pixels gets a
//! corrupted scene coordinate far from the truth.
//!
//! Scenes, trajectories and observations are stored through [`crate::store`];
//! all lengths are meters and all pixel values are pixels.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{residual_rgb, residual_rgbd, Intrinsics, Pose};
use crate::losses::TrainingTarget;
use crate::solvers::{Measurements, Mode};
use crate::store::StoreError;

pub const DESCRIPTOR_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("camera sees no scene point")]
    EmptyView,
    #[error("could not place an outlier {min_px} px / {min_m} m away from the truth")]
    OutlierPlacement { min_px: f64, min_m: f64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub points: Vec<Vector3<f64>>,
    /// One unit-norm column per point.
    pub descriptors: DMatrix<f64>,
    /// Side length of the bounding cube, meters.
    pub extent: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

pub fn gen_scene(n_points: usize, extent: f64, seed: u64) -> Result<SyntheticScene, SimError> {
    if n_points < 10 {
        return Err(SimError::InvalidParameter(format!(
            "need at least 10 points, got {n_points}"
        )));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(SimError::InvalidParameter(format!(
            "extent must be positive, got {extent}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent / 2.0;
    let points = (0..n_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            )
        })
        .collect();
    let mut descriptors =
        DMatrix::from_fn(DESCRIPTOR_DIM, n_points, |_, _| StandardNormal.sample(&mut rng));
    for mut c in descriptors.column_iter_mut() {
        c.normalize_mut();
    }
    Ok(SyntheticScene {
        points,
        descriptors,
        extent,
        seed,
    })
}

/// Camera pose at `eye` whose optical axis points at `target`; `up` fixes
/// the roll and must not be parallel to the viewing direction.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Pose::from_matrix(&Matrix3::from_columns(&[x, y, z]), *eye)
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Cameras on a shell of radius `1.6–2.4 × extent` around the scene
/// centroid, all looking at it with random roll.
pub fn gen_trajectory(scene: &SyntheticScene, n_views: usize, seed: u64) -> Result<Vec<Pose>, SimError> {
    if n_views == 0 {
        return Err(SimError::InvalidParameter("need at least one view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = scene.centroid();
    Ok((0..n_views)
        .map(|_| {
            let dir = random_unit(&mut rng);
            let radius = scene.extent * rng.random_range(1.6..2.4);
            let eye = center + dir * radius;
            let mut up = random_unit(&mut rng);
            while up.cross(&dir).norm() < 0.1 {
                up = random_unit(&mut rng);
            }
            look_at(&eye, &center, &up)
        })
        .collect())
}

/// Deterministic split: every `test_every`-th view goes to the test set.
pub fn split_views(views: &[Pose], test_every: usize) -> (Vec<Pose>, Vec<Pose>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, v) in views.iter().enumerate() {
        if test_every > 0 && i % test_every == test_every - 1 {
            test.push(*v);
        } else {
            train.push(*v);
        }
    }
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
    /// Gaussian pixel noise, pixels.
    pub noise_px: f64,
    /// Gaussian camera-point noise, meters.
    pub noise_m: f64,
    /// Gaussian descriptor jitter per component.
    pub descriptor_jitter: f64,
    pub outlier_frac: f64,
    /// Outliers land at least `outlier_margin × τ` from the truth.
    pub outlier_margin: f64,
    pub threshold_px: f64,
    pub threshold_m: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics {
                fx: 500.0,
                fy: 500.0,
                cx: 320.0,
                cy: 240.0,
            },
            width: 640,
            height: 480,
            noise_px: 0.0,
            noise_m: 0.0,
            descriptor_jitter: 0.01,
            outlier_frac: 0.0,
            outlier_margin: 5.0,
            threshold_px: 10.0,
            threshold_m: 0.1,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidParameter(m));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        for (name, v) in [
            ("noise_px", self.noise_px),
            ("noise_m", self.noise_m),
            ("descriptor_jitter", self.descriptor_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) {
            return bad(format!("outlier_frac must lie in [0, 1], got {}", self.outlier_frac));
        }
        if !(self.threshold_px > 0.0 && self.threshold_m > 0.0 && self.outlier_margin > 0.0) {
            return bad("thresholds must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Index of the scene point behind each pixel.
    pub point_ids: Vec<usize>,
    /// One descriptor column per pixel.
    pub descriptors: DMatrix<f64>,
    /// Observed pixel positions (noisy).
    pub pixels: Vec<Vector2<f64>>,
    /// Observed camera-frame points from the depth channel (noisy).
    pub camera_points: Vec<Vector3<f64>>,
    /// Ground-truth scene coordinates.
    pub scene_points: Vec<Vector3<f64>>,
    /// Scene coordinates with outliers substituted; what an ideal regressor
    /// with the configured error rate would predict.
    pub coords: Vec<Vector3<f64>>,
    pub outlier: Vec<bool>,
    pub noise_px: f64,
    pub noise_m: f64,
    pub outlier_frac: f64,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn measurements(&self, mode: Mode) -> Measurements {
        match mode {
            Mode::Rgb => Measurements::Rgb {
                intrinsics: self.intrinsics,
                pixels: self.pixels.clone(),
            },
            Mode::Rgbd => Measurements::Rgbd {
                points: self.camera_points.clone(),
            },
        }
    }

    /// Ground truth with every pixel's scene coordinate present.
    pub fn target(&self) -> TrainingTarget {
        TrainingTarget::new(self.scene_points.iter().map(|y| Some(*y)).collect(), self.pose)
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier.iter().filter(|&&o| o).count()
    }
}

/// Projects every scene point visible from `pose` into the image.
pub fn render(
    scene: &SyntheticScene,
    pose: &Pose,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Observation, SimError> {
    cfg.validate()?;
    let k = cfg.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visible: Vec<(usize, Vector3<f64>, Vector2<f64>)> = scene
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, y)| {
            let c = pose.to_camera(y);
            let p = k.project_camera(&c)?;
            let inside = p.x >= 0.0
                && p.y >= 0.0
                && p.x < cfg.width as f64
                && p.y < cfg.height as f64;
            inside.then_some((i, c, p))
        })
        .collect();
    if visible.is_empty() {
        return Err(SimError::EmptyView);
    }
    let n = visible.len();
    let px_noise = Normal::new(0.0, cfg.noise_px).expect("validated");
    let m_noise = Normal::new(0.0, cfg.noise_m).expect("validated");
    let d_noise = Normal::new(0.0, cfg.descriptor_jitter).expect("validated");

    let mut obs = Observation {
        pose: *pose,
        intrinsics: k,
        point_ids: Vec::with_capacity(n),
        descriptors: DMatrix::zeros(scene.descriptors.nrows(), n),
        pixels: Vec::with_capacity(n),
        camera_points: Vec::with_capacity(n),
        scene_points: Vec::with_capacity(n),
        coords: Vec::with_capacity(n),
        outlier: vec![false; n],
        noise_px: cfg.noise_px,
        noise_m: cfg.noise_m,
        outlier_frac: cfg.outlier_frac,
    };
    for (j, (i, c, p)) in visible.iter().enumerate() {
        let desc = scene.descriptors.column(*i).map(|v| v + d_noise.sample(&mut rng));
        obs.descriptors.set_column(j, &desc);
        obs.point_ids.push(*i);
        obs.pixels
            .push(p + Vector2::new(px_noise.sample(&mut rng), px_noise.sample(&mut rng)));
        obs.camera_points.push(
            c + Vector3::new(
                m_noise.sample(&mut rng),
                m_noise.sample(&mut rng),
                m_noise.sample(&mut rng),
            ),
        );
        obs.scene_points.push(scene.points[*i]);
        obs.coords.push(scene.points[*i]);
    }

    let n_out = (cfg.outlier_frac * n as f64).round() as usize;
    let min_px = cfg.outlier_margin * cfg.threshold_px;
    let min_m = cfg.outlier_margin * cfg.threshold_m;
    let half = scene.extent / 2.0;
    for j in index::sample(&mut rng, n, n_out) {
        let mut placed = false;
        for _ in 0..10_000 {
            // uniform in a box twice the scene size
            let y = Vector3::new(
                rng.random_range(-2.0 * half..=2.0 * half),
                rng.random_range(-2.0 * half..=2.0 * half),
                rng.random_range(-2.0 * half..=2.0 * half),
            );
            if residual_rgb(&y, pose, &obs.pixels[j], &k) > min_px
                && residual_rgbd(&y, pose, &obs.camera_points[j]) > min_m
            {
                obs.coords[j] = y;
                obs.outlier[j] = true;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SimError::OutlierPlacement { min_px, min_m });
        }
    }
    Ok(obs)
}

pub const SCENE_FORMAT: &str = "dsac-scene";
pub const OBSERVATION_FORMAT: &str = "dsac-observation";
pub const TRAJECTORY_FORMAT: &str = "dsac-trajectory";
