//! Scene, views and rendered observations for a run.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::CliError;
use crate::geom::Pose;
use crate::sim::{gen_scene, gen_trajectory, render, split_views, Observation, SyntheticScene, SCENE_FORMAT, TRAJECTORY_FORMAT};
use crate::store::load_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub train: Vec<Pose>,
    pub test: Vec<Pose>,
}

pub struct Dataset {
    pub scene: SyntheticScene,
    pub trajectory: Trajectory,
    pub train: Vec<Observation>,
    pub test: Vec<Observation>,
}

/// Derives an independent seed for sub-task `tag` of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const TAG_SCENE: u64 = 1;
pub const TAG_TRAJECTORY: u64 = 2;
pub const TAG_RENDER_TRAIN: u64 = 3;
pub const TAG_RENDER_TEST: u64 = 4;
pub const TAG_NETWORK: u64 = 5;
pub const TAG_TRAIN: u64 = 6;
pub const TAG_EVAL: u64 = 7;

pub fn scene_and_trajectory(cfg: &RunConfig) -> Result<(SyntheticScene, Trajectory), CliError> {
    let scene = match &cfg.scene.path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!("scene file {} not found", p.display())));
            }
            load_json(p, SCENE_FORMAT).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => gen_scene(cfg.scene.points, cfg.scene.extent, derive_seed(cfg.seed, TAG_SCENE))
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    let trajectory = match &cfg.scene.trajectory {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!("trajectory file {} not found", p.display())));
            }
            load_json(p, TRAJECTORY_FORMAT).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => {
            let views = gen_trajectory(&scene, cfg.scene.views, derive_seed(cfg.seed, TAG_TRAJECTORY))
                .map_err(|e| CliError::Config(e.to_string()))?;
            let (train, test) = split_views(&views, cfg.scene.test_every);
            Trajectory { train, test }
        }
    };
    Ok((scene, trajectory))
}

fn render_all(
    scene: &SyntheticScene,
    poses: &[Pose],
    cfg: &RunConfig,
    tag: u64,
) -> Result<Vec<Observation>, CliError> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            render(scene, pose, &cfg.render, derive_seed(derive_seed(cfg.seed, tag), i as u64))
                .map_err(|e| CliError::Config(format!("view {i}: {e}")))
        })
        .collect()
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let (scene, trajectory) = scene_and_trajectory(cfg)?;
        let train = render_all(&scene, &trajectory.train, cfg, TAG_RENDER_TRAIN)?;
        let test = render_all(&scene, &trajectory.test, cfg, TAG_RENDER_TEST)?;
        Ok(Self {
            scene,
            trajectory,
            train,
            test,
        })
    }
}
