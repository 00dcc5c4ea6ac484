//! Pose accuracy on the held-out views.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::data::{derive_seed, Dataset, TAG_EVAL};
use super::train::FINAL_CHECKPOINT;
use super::CliError;
use crate::geom::rotation_angle_deg;
use crate::regressor::{Checkpoint, Mlp, CHECKPOINT_FORMAT};
use crate::robust::{estimate, SelectionMode};
use crate::solvers::Correspondences;
use crate::store::load_json;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub median_translation_cm: f64,
    pub median_rotation_deg: f64,
    /// `((cm, deg), percentage of views within both)`.
    pub accuracy: Vec<((f64, f64), f64)>,
}

/// Where scene coordinates come from.
pub enum CoordSource<'a> {
    /// Rendered coordinates including injected outliers; an upper bound for
    /// any regressor.
    Oracle,
    Network(&'a Mlp),
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn evaluate(cfg: &RunConfig, data: &Dataset, source: CoordSource<'_>) -> Result<EvalReport, CliError> {
    if data.test.is_empty() {
        return Err(CliError::Config("test split is empty".into()));
    }
    let mode = cfg.mode.estimation_mode();
    let seed = derive_seed(cfg.seed, TAG_EVAL);
    let mut views = Vec::with_capacity(data.test.len());
    for (v, obs) in data.test.iter().enumerate() {
        let coords = match &source {
            CoordSource::Oracle => obs.coords.clone(),
            CoordSource::Network(mlp) => mlp
                .predict(&obs.descriptors)
                .map_err(|e| CliError::Config(format!("checkpoint does not fit the scene: {e}")))?,
        };
        let meas = obs.measurements(mode);
        let corrs = Correspondences::new(&meas, &coords).map_err(|e| CliError::Numerical(e.to_string()))?;
        let metrics = match estimate(&corrs, &cfg.estimator, SelectionMode::Test, derive_seed(seed, v as u64)) {
            Ok(r) => ViewMetrics {
                view: v,
                translation_cm: 100.0 * (r.pose.translation - obs.pose.translation).norm(),
                rotation_deg: rotation_angle_deg(&r.pose.rotation, &obs.pose.rotation),
                inliers: r.inliers.len(),
            },
            Err(e) => {
                log::warn!("view {v}: no estimate ({e})");
                ViewMetrics {
                    view: v,
                    translation_cm: f64::INFINITY,
                    rotation_deg: f64::INFINITY,
                    inliers: 0,
                }
            }
        };
        views.push(metrics);
    }
    let t: Vec<f64> = views.iter().map(|m| m.translation_cm).collect();
    let r: Vec<f64> = views.iter().map(|m| m.rotation_deg).collect();
    let accuracy = cfg
        .eval
        .thresholds
        .iter()
        .map(|&(cm, deg)| {
            let ok = views
                .iter()
                .filter(|m| m.translation_cm < cm && m.rotation_deg < deg)
                .count();
            ((cm, deg), 100.0 * ok as f64 / views.len() as f64)
        })
        .collect();
    Ok(EvalReport {
        median_translation_cm: median(&t),
        median_rotation_deg: median(&r),
        views,
        accuracy,
    })
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("view,translation_cm,rotation_deg,inliers\n");
    for m in &report.views {
        let _ = writeln!(out, "{},{},{},{}", m.view, m.translation_cm, m.rotation_deg, m.inliers);
    }
    out
}

pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "views,{}", report.views.len());
    let _ = writeln!(out, "median_translation_cm,{}", report.median_translation_cm);
    let _ = writeln!(out, "median_rotation_deg,{}", report.median_rotation_deg);
    for ((cm, deg), pct) in &report.accuracy {
        let _ = writeln!(out, "pct_below_{cm}cm_{deg}deg,{pct}");
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    load_json(path, CHECKPOINT_FORMAT).map_err(|e| CliError::Config(e.to_string()))
}

/// Evaluates a checkpoint (or the oracle) and writes the metric files.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let data = Dataset::build(cfg)?;
    let report = if oracle {
        evaluate(cfg, &data, CoordSource::Oracle)?
    } else {
        let path: PathBuf = checkpoint
            .map(Path::to_path_buf)
            .or_else(|| cfg.eval.checkpoint.clone())
            .unwrap_or_else(|| cfg.out.join(FINAL_CHECKPOINT));
        let ckpt = load_checkpoint(&path)?;
        if ckpt.preset.is_some_and(|p| p != cfg.train.preset) {
            return Err(CliError::Config(format!(
                "checkpoint preset {:?} does not match configured {:?}",
                ckpt.preset, cfg.train.preset
            )));
        }
        if ckpt.network.input_dim() != data.scene.descriptors.nrows() || ckpt.network.output_dim() != 3 {
            return Err(CliError::Config(format!(
                "checkpoint network {}→{} does not fit {}-d descriptors",
                ckpt.network.input_dim(),
                ckpt.network.output_dim(),
                data.scene.descriptors.nrows()
            )));
        }
        evaluate(cfg, &data, CoordSource::Network(&ckpt.network))?
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join(METRICS_FILE), metrics_csv(&report))
        .map_err(|e| CliError::Io(format!("{METRICS_FILE}: {e}")))?;
    std::fs::write(cfg.out.join(SUMMARY_FILE), summary_csv(&report))
        .map_err(|e| CliError::Io(format!("{SUMMARY_FILE}: {e}")))?;
    Ok(report)
}
