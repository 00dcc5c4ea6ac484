//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::losses::LossConfig;
use crate::regressor::Preset;
use crate::robust::EstimatorConfig;
use crate::sim::RenderConfig;
use crate::solvers::Mode;

/// Training mode: which measurements are available and which
/// initialization loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Depth available: 3D-3D estimation, Euclidean initialization loss.
    Rgbd,
    /// RGB with ground-truth scene coordinates from a 3D model.
    RgbModel,
    /// RGB with poses only; heuristic initialization targets.
    RgbOnly,
}

impl TrainMode {
    pub fn estimation_mode(self) -> Mode {
        match self {
            TrainMode::Rgbd => Mode::Rgbd,
            TrainMode::RgbModel | TrainMode::RgbOnly => Mode::Rgb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Load the scene from this file instead of generating it.
    pub path: Option<PathBuf>,
    /// Load camera poses from this file instead of generating them.
    pub trajectory: Option<PathBuf>,
    pub points: usize,
    /// Side of the scene cube, meters.
    pub extent: f64,
    pub views: usize,
    /// Every `test_every`-th view is held out for evaluation.
    pub test_every: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            path: None,
            trajectory: None,
            points: 2000,
            extent: 4.0,
            views: 96,
            test_every: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub init_iters: usize,
    pub e2e_iters: usize,
    pub init_lr: f64,
    pub e2e_lr: f64,
    /// Pixels drawn per iteration; 0 uses every pixel of the view.
    pub pixels_per_iter: usize,
    /// Checkpoint interval in iterations; 0 disables intermediate
    /// checkpoints.
    pub checkpoint_every: usize,
    /// Start end-to-end training from this checkpoint and skip the
    /// initialization phase.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Default,
            init_iters: 10_000,
            e2e_iters: 1_000,
            init_lr: 1e-4,
            e2e_lr: 1e-6,
            pixels_per_iter: 0,
            checkpoint_every: 0,
            init_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoint to evaluate; defaults to the final training checkpoint in
    /// the output directory.
    pub checkpoint: Option<PathBuf>,
    /// `(cm, deg)` accuracy thresholds.
    pub thresholds: Vec<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            thresholds: vec![(5.0, 5.0), (2.0, 2.0), (1.0, 1.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub workers: usize,
    pub out: PathBuf,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub estimator: EstimatorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_mode(TrainMode::RgbOnly)
    }
}

impl RunConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        Self {
            mode,
            seed: 0,
            workers: 0,
            out: PathBuf::from("out"),
            scene: SceneConfig::default(),
            render: RenderConfig {
                noise_px: 0.5,
                noise_m: 0.005,
                ..RenderConfig::default()
            },
            estimator: EstimatorConfig::for_mode(mode.estimation_mode()),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses TOML text. When the file leaves the inlier threshold unset it
    /// defaults to the unit of the configured mode (10 px or 0.1 m).
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let threshold_set = table
            .get("estimator")
            .and_then(|e| e.get("threshold"))
            .is_some();
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if !threshold_set {
            cfg.estimator.threshold =
                EstimatorConfig::for_mode(cfg.mode.estimation_mode()).threshold;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Switches mode, moving the threshold to the new mode's default when it
    /// still holds the old mode's default.
    pub fn set_mode(&mut self, mode: TrainMode) {
        let old = EstimatorConfig::for_mode(self.mode.estimation_mode()).threshold;
        if self.estimator.threshold == old {
            self.estimator.threshold = EstimatorConfig::for_mode(mode.estimation_mode()).threshold;
        }
        self.mode = mode;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |m: String| Err(CliError::Config(m));
        self.estimator
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.render
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let tau = self.estimator.threshold;
        match self.mode.estimation_mode() {
            Mode::Rgbd if tau > 1.0 => {
                return cfg_err(format!(
                    "threshold {tau} looks like pixels but mode {:?} measures meters",
                    self.mode
                ))
            }
            Mode::Rgb if tau < 0.5 => {
                return cfg_err(format!(
                    "threshold {tau} looks like meters but mode {:?} measures pixels",
                    self.mode
                ))
            }
            _ => {}
        }
        if self.scene.path.is_none() && !(self.scene.extent > 0.0 && self.scene.extent.is_finite()) {
            return cfg_err(format!("scene extent must be positive, got {}", self.scene.extent));
        }
        if self.scene.path.is_none() && self.scene.points < 10 {
            return cfg_err(format!("scene needs at least 10 points, got {}", self.scene.points));
        }
        if self.scene.views == 0 {
            return cfg_err("scene needs at least one view".into());
        }
        if !(self.train.init_lr > 0.0 && self.train.e2e_lr > 0.0) {
            return cfg_err("learning rates must be positive".into());
        }
        if self
            .eval
            .thresholds
            .iter()
            .any(|&(cm, deg)| !(cm > 0.0 && deg > 0.0))
        {
            return cfg_err("accuracy thresholds must be positive".into());
        }
        Ok(())
    }
}
