//! Two-phase training: per-pixel initialization, then end-to-end training
//! through the estimator against the expected pose loss.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TrainMode};
use super::data::{derive_seed, Dataset, TAG_NETWORK, TAG_TRAIN};
use super::CliError;
use crate::losses::{expected_pose_loss, loss_rgb_model, loss_rgb_only, loss_rgbd, TrainingTarget};
use crate::regressor::{Adam, Checkpoint, Mlp, CHECKPOINT_FORMAT};
use crate::robust::{estimate, SelectionMode};
use crate::sim::Observation;
use crate::solvers::{Correspondences, Measurements};
use crate::store::save_json;

pub const INIT_CHECKPOINT: &str = "checkpoint_init.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    EndToEnd,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::EndToEnd => "e2e",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub phase: Phase,
    pub iteration: usize,
    pub view: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub init_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    /// End-to-end iterations skipped because hypothesis sampling failed.
    pub skipped: usize,
}

impl TrainReport {
    pub fn phase_losses(&self, phase: Phase) -> Vec<f64> {
        self.curve
            .iter()
            .filter(|p| p.phase == phase)
            .map(|p| p.loss)
            .collect()
    }
}

/// Cycles through the training views in a fresh random order every epoch.
struct ViewSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl ViewSchedule {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One training sample: the selected pixels of a view.
struct Batch {
    features: DMatrix<f64>,
    pixels: Vec<Vector2<f64>>,
    camera_points: Vec<Vector3<f64>>,
    target: TrainingTarget,
}

fn batch(obs: &Observation, pixels: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut idx: Vec<usize> = if pixels == 0 || pixels >= obs.len() {
        (0..obs.len()).collect()
    } else {
        index::sample(rng, obs.len(), pixels).into_vec()
    };
    idx.sort_unstable();
    Batch {
        features: obs.descriptors.select_columns(&idx),
        pixels: idx.iter().map(|&i| obs.pixels[i]).collect(),
        camera_points: idx.iter().map(|&i| obs.camera_points[i]).collect(),
        target: TrainingTarget::new(idx.iter().map(|&i| Some(obs.scene_points[i])).collect(), obs.pose),
    }
}

/// Mean initialization target over the training views: ground-truth scene
/// points, or heuristic targets when only poses are known.
fn mean_target(cfg: &RunConfig, views: &[Observation]) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for obs in views {
        for j in 0..obs.len() {
            sum += match cfg.mode {
                TrainMode::RgbOnly => TrainingTarget::pose_only(0, obs.pose).heuristic(&obs.intrinsics, &obs.pixels[j]),
                _ => obs.scene_points[j],
            };
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    save_json(path, CHECKPOINT_FORMAT, ckpt).map_err(|e| CliError::Io(e.to_string()))
}

fn non_finite(phase: Phase, iteration: usize, what: &str) -> CliError {
    CliError::Numerical(format!("{} iteration {iteration}: non-finite {what}", phase.name()))
}

fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("phase,iteration,view,loss\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.phase.name(), p.iteration, p.view, p.loss);
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let data = Dataset::build(cfg)?;
    if data.train.is_empty() {
        return Err(CliError::Config("training split is empty".into()));
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;

    let resumed = match &cfg.train.init_from {
        Some(path) => Some(super::eval::load_checkpoint(path)?),
        None => None,
    };
    let mut mlp = match &resumed {
        Some(ckpt) => ckpt.network.clone(),
        None => Mlp::preset(cfg.train.preset, derive_seed(cfg.seed, TAG_NETWORK)),
    };
    if mlp.input_dim() != data.scene.descriptors.nrows() {
        return Err(CliError::Config(format!(
            "network expects {}-d descriptors, scene has {}",
            mlp.input_dim(),
            data.scene.descriptors.nrows()
        )));
    }
    if resumed.is_none() {
        mlp.set_output_bias(mean_target(cfg, &data.train).as_slice())
            .expect("3-d output");
    }
    let init_iters = if resumed.is_some() { 0 } else { cfg.train.init_iters };

    let train_seed = derive_seed(cfg.seed, TAG_TRAIN);
    let mut schedule = ViewSchedule::new(data.train.len(), train_seed);
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_seed, 1));
    let mut curve = Vec::with_capacity(init_iters + cfg.train.e2e_iters);
    let mut iteration = resumed.as_ref().map_or(0, |c| c.iteration);
    let checkpoint = |mlp: &Mlp, adam: &Adam, iteration: u64, phase: Phase, name: &str| -> Result<PathBuf, CliError> {
        let path = cfg.out.join(name);
        save_checkpoint(
            &path,
            &Checkpoint {
                preset: Some(cfg.train.preset),
                network: mlp.clone(),
                optimizer: adam.clone(),
                iteration,
                phase: phase.name().into(),
            },
        )?;
        Ok(path)
    };
    let periodic = |i: usize| cfg.train.checkpoint_every > 0 && (i + 1) % cfg.train.checkpoint_every == 0;

    let mut adam = Adam::new(&mlp, cfg.train.init_lr);
    for i in 0..init_iters {
        let view = schedule.next();
        let obs = &data.train[view];
        let b = batch(obs, cfg.train.pixels_per_iter, &mut pixel_rng);
        let cache = mlp.forward(&b.features).map_err(|e| CliError::Numerical(e.to_string()))?;
        let coords = cache.coords();
        let k = &obs.intrinsics;
        let out = match cfg.mode {
            TrainMode::Rgbd => loss_rgbd(&coords, &b.target.coords),
            TrainMode::RgbModel => loss_rgb_model(&coords, &b.pixels, k, &b.target, &cfg.loss),
            TrainMode::RgbOnly => {
                let t = TrainingTarget::pose_only(coords.len(), obs.pose);
                loss_rgb_only(&coords, &b.pixels, k, &t, &cfg.loss)
            }
        }
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        if !out.value.is_finite() {
            return Err(non_finite(Phase::Init, i, "loss"));
        }
        let grads = mlp.backward(&cache, &out.grad).map_err(|e| CliError::Numerical(e.to_string()))?;
        adam.step(&mut mlp, &grads).map_err(|e| CliError::Numerical(e.to_string()))?;
        iteration += 1;
        curve.push(CurvePoint {
            phase: Phase::Init,
            iteration: i,
            view,
            loss: out.value,
        });
        if periodic(i) {
            checkpoint(&mlp, &adam, iteration, Phase::Init, &format!("checkpoint_init_{:06}.json", i + 1))?;
        }
        if i % 1000 == 0 {
            log::info!("init {i}: loss {:.4}", out.value);
        }
    }
    let init_checkpoint = checkpoint(&mlp, &adam, iteration, Phase::Init, INIT_CHECKPOINT)?;

    let mode = cfg.mode.estimation_mode();
    let mut adam = Adam::new(&mlp, cfg.train.e2e_lr);
    let mut skipped = 0;
    for i in 0..cfg.train.e2e_iters {
        let view = schedule.next();
        let obs = &data.train[view];
        let b = batch(obs, cfg.train.pixels_per_iter, &mut pixel_rng);
        let cache = mlp.forward(&b.features).map_err(|e| CliError::Numerical(e.to_string()))?;
        let coords = cache.coords();
        let meas = match mode {
            crate::solvers::Mode::Rgb => Measurements::Rgb {
                intrinsics: obs.intrinsics,
                pixels: b.pixels.clone(),
            },
            crate::solvers::Mode::Rgbd => Measurements::Rgbd {
                points: b.camera_points.clone(),
            },
        };
        if coords.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
            return Err(non_finite(Phase::EndToEnd, i, "prediction"));
        }
        let corrs = Correspondences::new(&meas, &coords).map_err(|e| CliError::Numerical(e.to_string()))?;
        let result = match estimate(&corrs, &cfg.estimator, SelectionMode::Train, derive_seed(train_seed, 1000 + i as u64)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("e2e {i}: skipped ({e})");
                skipped += 1;
                continue;
            }
        };
        let e = expected_pose_loss(&result, &corrs, &obs.pose, &cfg.estimator, &cfg.loss)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        if !e.value.is_finite() || e.grad.iter().any(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(non_finite(Phase::EndToEnd, i, "expected loss"));
        }
        let grads = mlp.backward(&cache, &e.grad).map_err(|e| CliError::Numerical(e.to_string()))?;
        adam.step(&mut mlp, &grads).map_err(|e| CliError::Numerical(e.to_string()))?;
        iteration += 1;
        curve.push(CurvePoint {
            phase: Phase::EndToEnd,
            iteration: i,
            view,
            loss: e.value,
        });
        if periodic(i) {
            checkpoint(&mlp, &adam, iteration, Phase::EndToEnd, &format!("checkpoint_e2e_{:06}.json", i + 1))?;
        }
        if i % 100 == 0 {
            log::info!("e2e {i}: expected loss {:.4}", e.value);
        }
    }
    let final_checkpoint = checkpoint(&mlp, &adam, iteration, Phase::EndToEnd, FINAL_CHECKPOINT)?;
    std::fs::write(cfg.out.join(LOSS_CURVE), curve_csv(&curve))
        .map_err(|e| CliError::Io(format!("{LOSS_CURVE}: {e}")))?;
    Ok(TrainReport {
        curve,
        init_checkpoint,
        final_checkpoint,
        skipped,
    })
}

/// Means of consecutive non-overlapping windows of `window` values; a
/// trailing partial window is dropped.
pub fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
