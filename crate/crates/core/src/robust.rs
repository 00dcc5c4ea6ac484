//! RANSAC / DSAC estimator over a scene coordinate field.
//!
//! `estimate` samples `M` minimal-set hypotheses, scores each with a soft
//! inlier count, selects one (argmax at test time, softmax sampling at
//! training time) and refines by alternating inlier re-computation and a full
//! solve. Each hypothesis slot draws from its own seeded random stream, so
//! parallel and sequential execution give identical results.

use nalgebra::{Vector3, Vector6};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose;
use crate::solvers::{Correspondences, LmConfig, Mode, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("hypothesis slot {slot} found no acceptable minimal set in {attempts} attempts")]
    ExhaustedSampling { slot: usize, attempts: usize },
    #[error("hypothesis has no usable inlier set")]
    NoInliers,
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Number of hypotheses `M`.
    pub hypotheses: usize,
    /// Inlier threshold `τ` (pixels for RGB, meters for RGB-D).
    pub threshold: f64,
    /// Sigmoid sharpness; `5/τ` when unset.
    pub beta: Option<f64>,
    /// Softmax temperature; `100/|Y|` when unset.
    pub alpha: Option<f64>,
    pub max_refine_iters: usize,
    pub max_resample_attempts: usize,
    /// Score with the hard inlier count instead of the soft one in test mode.
    pub hard_test_scoring: bool,
    pub lm: LmConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::for_mode(Mode::Rgb)
    }
}

impl EstimatorConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            hypotheses: 64,
            threshold: match mode {
                Mode::Rgb => 10.0,
                Mode::Rgbd => 0.1,
            },
            beta: None,
            alpha: None,
            max_refine_iters: 100,
            max_resample_attempts: 1000,
            hard_test_scoring: false,
            lm: LmConfig::default(),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(5.0 / self.threshold)
    }

    pub fn alpha(&self, field_size: usize) -> f64 {
        self.alpha.unwrap_or(100.0 / field_size.max(1) as f64)
    }

    pub fn validate(&self) -> Result<(), EstimateError> {
        let bad = |m: &str| Err(EstimateError::InvalidConfig(m.to_string()));
        if self.hypotheses == 0 {
            return bad("hypotheses must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad("threshold must be positive");
        }
        if self.beta.is_some_and(|b| !(b > 0.0)) {
            return bad("beta must be positive");
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return bad("alpha must be positive");
        }
        if self.max_resample_attempts == 0 {
            return bad("max_resample_attempts must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub pose: Pose,
    pub minimal_set: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    /// Correspondences the hypothesis pose is an exact function of. For RGB
    /// the fourth point only picks among P3P solutions.
    pub fn solved_from(&self) -> &[usize] {
        match self.minimal_set.len() {
            4 => &self.minimal_set[..3],
            _ => &self.minimal_set,
        }
    }
}

/// Outcome of refining one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub pose: Pose,
    /// Inlier set the final pose was solved from; empty when `refined` is
    /// false and the pose is the unrefined hypothesis.
    pub inliers: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub pose: Pose,
    pub selected: usize,
    pub hypotheses: Vec<Hypothesis>,
    /// Final inlier set of the selected hypothesis.
    pub inliers: Vec<usize>,
    /// `p(j|Y)`, training mode only.
    pub probabilities: Option<Vec<f64>>,
    /// One entry per hypothesis; in test mode only the selected one is set.
    pub refinements: Vec<Option<Refinement>>,
}

fn slot_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_slot(
    corrs: &Correspondences<'_>,
    cfg: &EstimatorConfig,
    seed: u64,
    slot: usize,
) -> Result<(Pose, Vec<usize>), EstimateError> {
    let k = corrs.mode().minimal_set_size();
    let mut rng = slot_rng(seed, slot as u64);
    for _ in 0..cfg.max_resample_attempts {
        let idx = index::sample(&mut rng, corrs.len(), k).into_vec();
        let Ok(pose) = corrs.solve_minimal(&idx) else {
            continue;
        };
        if idx.iter().all(|&i| corrs.residual(i, &pose) < cfg.threshold) {
            return Ok((pose, idx));
        }
    }
    Err(EstimateError::ExhaustedSampling {
        slot,
        attempts: cfg.max_resample_attempts,
    })
}

/// Draws `M` minimal sets and solves each; a set whose own residuals exceed
/// `τ` under its pose is rejected and redrawn.
pub fn sample_hypotheses(
    corrs: &Correspondences<'_>,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<(Pose, Vec<usize>)>, EstimateError> {
    cfg.validate()?;
    let k = corrs.mode().minimal_set_size();
    if corrs.len() < k {
        return Err(SolverError::TooFewCorrespondences {
            required: k,
            actual: corrs.len(),
        }
        .into());
    }
    (0..cfg.hypotheses)
        .into_par_iter()
        .map(|slot| sample_slot(corrs, cfg, seed, slot))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft inlier count `Σ σ(βτ - β r_i)`.
pub fn score_soft(corrs: &Correspondences<'_>, h: &Pose, cfg: &EstimatorConfig) -> f64 {
    let beta = cfg.beta();
    (0..corrs.len())
        .map(|i| sigmoid(beta * (cfg.threshold - corrs.residual(i, h))))
        .sum()
}

/// Hard inlier count `Σ 1[r_i < τ]`.
pub fn score_hard(corrs: &Correspondences<'_>, h: &Pose, cfg: &EstimatorConfig) -> f64 {
    (0..corrs.len())
        .filter(|&i| corrs.residual(i, h) < cfg.threshold)
        .count() as f64
}

/// Soft score with its derivatives w.r.t. every scene coordinate (pose held
/// fixed) and w.r.t. the pose increment.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftScore {
    pub value: f64,
    pub d_scene: Vec<Vector3<f64>>,
    pub d_pose: Vector6<f64>,
}

pub fn score_soft_grad(corrs: &Correspondences<'_>, h: &Pose, cfg: &EstimatorConfig) -> SoftScore {
    let beta = cfg.beta();
    let mut value = 0.0;
    let mut d_pose = Vector6::zeros();
    let d_scene = (0..corrs.len())
        .map(|i| {
            let r = corrs.residual_grad(i, h);
            let s = sigmoid(beta * (cfg.threshold - r.value));
            value += s;
            let ds_dr = -beta * s * (1.0 - s);
            d_pose += r.d_pose * ds_dr;
            r.d_scene * ds_dr
        })
        .collect();
    SoftScore {
        value,
        d_scene,
        d_pose,
    }
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_score(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

/// `softmax(α s)`.
pub fn selection_probabilities(scores: &[f64], alpha: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (alpha * (s - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

pub fn select(scores: &[f64], alpha: f64, mode: SelectionMode, rng: &mut impl Rng) -> Selection {
    match mode {
        SelectionMode::Test => Selection {
            index: argmax_score(scores),
            probabilities: None,
        },
        SelectionMode::Train => {
            let probabilities = selection_probabilities(scores, alpha);
            Selection {
                index: sample_categorical(&probabilities, rng),
                probabilities: Some(probabilities),
            }
        }
    }
}

pub fn inlier_set(corrs: &Correspondences<'_>, h: &Pose, threshold: f64) -> Vec<usize> {
    (0..corrs.len())
        .filter(|&i| corrs.residual(i, h) < threshold)
        .collect()
}

/// Alternates a full solve on the current inlier set with inlier
/// re-computation until the set repeats or the iteration cap is hit.
pub fn refine(
    corrs: &Correspondences<'_>,
    h: &Pose,
    cfg: &EstimatorConfig,
) -> Result<Refinement, EstimateError> {
    let min_size = corrs.mode().minimal_set_size();
    let mut inliers = inlier_set(corrs, h, cfg.threshold);
    if inliers.len() < min_size {
        return Err(EstimateError::NoInliers);
    }
    let mut pose = *h;
    let mut support: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_refine_iters {
        let Ok(next) = corrs.solve_subset(&inliers, &pose, &cfg.lm) else {
            break;
        };
        iterations += 1;
        pose = next;
        let next_inliers = inlier_set(corrs, &pose, cfg.threshold);
        let same = next_inliers == inliers;
        support = Some(std::mem::replace(&mut inliers, next_inliers));
        if same {
            converged = true;
            break;
        }
        if inliers.len() < min_size {
            break;
        }
    }
    let inliers = support.ok_or(EstimateError::NoInliers)?;
    Ok(Refinement {
        pose,
        inliers,
        iterations,
        converged,
        refined: true,
    })
}

/// [`refine`], falling back to the unrefined hypothesis when it has no
/// usable inliers.
pub fn refine_or_keep(corrs: &Correspondences<'_>, h: &Pose, cfg: &EstimatorConfig) -> Refinement {
    refine(corrs, h, cfg).unwrap_or(Refinement {
        pose: *h,
        inliers: Vec::new(),
        iterations: 0,
        converged: false,
        refined: false,
    })
}

/// Full sample / score / select / refine pipeline.
pub fn estimate(
    corrs: &Correspondences<'_>,
    cfg: &EstimatorConfig,
    mode: SelectionMode,
    seed: u64,
) -> Result<EstimateResult, EstimateError> {
    let sampled = sample_hypotheses(corrs, cfg, seed)?;
    let hard = mode == SelectionMode::Test && cfg.hard_test_scoring;
    let hypotheses: Vec<Hypothesis> = sampled
        .into_par_iter()
        .map(|(pose, minimal_set)| {
            let score = if hard {
                score_hard(corrs, &pose, cfg)
            } else {
                score_soft(corrs, &pose, cfg)
            };
            Hypothesis {
                pose,
                minimal_set,
                score,
            }
        })
        .collect();
    let scores: Vec<f64> = hypotheses.iter().map(|h| h.score).collect();
    let mut rng = slot_rng(seed, cfg.hypotheses as u64);
    let selection = select(&scores, cfg.alpha(corrs.len()), mode, &mut rng);

    let refinements: Vec<Option<Refinement>> = match mode {
        SelectionMode::Train => hypotheses
            .par_iter()
            .map(|h| Some(refine_or_keep(corrs, &h.pose, cfg)))
            .collect(),
        SelectionMode::Test => (0..hypotheses.len())
            .map(|j| {
                (j == selection.index)
                    .then(|| refine_or_keep(corrs, &hypotheses[j].pose, cfg))
            })
            .collect(),
    };
    let chosen = refinements[selection.index]
        .as_ref()
        .expect("selected hypothesis is always refined");
    Ok(EstimateResult {
        pose: chosen.pose,
        selected: selection.index,
        inliers: chosen.inliers.clone(),
        probabilities: selection.probabilities,
        hypotheses,
        refinements,
    })
}

/// Discrete choices of a training-mode estimate: minimal sets and final
/// inlier sets. Replaying them as functions of the scene coordinates gives
/// the smooth surrogate the training gradient differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenChoices {
    pub minimal_sets: Vec<Vec<usize>>,
    /// Final inlier set per hypothesis, `None` where refinement fell back to
    /// the hypothesis itself.
    pub supports: Vec<Option<Vec<usize>>>,
    /// Refined poses of the original run, used to seed iterative solves.
    pub seeds: Vec<Pose>,
}

impl EstimateResult {
    pub fn frozen(&self) -> Option<FrozenChoices> {
        let refs: Option<Vec<&Refinement>> =
            self.refinements.iter().map(|r| r.as_ref()).collect();
        let refs = refs?;
        Some(FrozenChoices {
            minimal_sets: self
                .hypotheses
                .iter()
                .map(|h| h.minimal_set.clone())
                .collect(),
            supports: refs
                .iter()
                .map(|r| r.refined.then(|| r.inliers.clone()))
                .collect(),
            seeds: refs.iter().map(|r| r.pose).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub hypotheses: Vec<Pose>,
    pub scores: Vec<f64>,
    pub refined: Vec<Pose>,
}

/// Re-evaluates hypotheses, soft scores and refined poses with all discrete
/// choices held fixed.
pub fn replay(
    corrs: &Correspondences<'_>,
    frozen: &FrozenChoices,
    cfg: &EstimatorConfig,
) -> Result<Replay, EstimateError> {
    let mut hypotheses = Vec::with_capacity(frozen.minimal_sets.len());
    let mut scores = Vec::with_capacity(frozen.minimal_sets.len());
    let mut refined = Vec::with_capacity(frozen.minimal_sets.len());
    for ((set, support), seed) in frozen
        .minimal_sets
        .iter()
        .zip(&frozen.supports)
        .zip(&frozen.seeds)
    {
        let h = corrs.solve_minimal(set)?;
        scores.push(score_soft(corrs, &h, cfg));
        refined.push(match support {
            Some(s) => corrs.solve_subset(s, seed, &cfg.lm)?,
            None => h,
        });
        hypotheses.push(h);
    }
    Ok(Replay {
        hypotheses,
        scores,
        refined,
    })
}
