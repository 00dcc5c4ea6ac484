//! Command-line front end: `gradcheck`, `simgen`, `train` and `eval`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical
//! failure (including failed gradient checks).

pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::sim::{SCENE_FORMAT, TRAJECTORY_FORMAT};
use crate::store::save_json;
use config::{RunConfig, TrainMode};
use data::scene_and_trajectory;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dsac", version, about = "Differentiable RANSAC camera relocalization on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<TrainMode>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Corrupt the analytic gradients (negative control).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Generate a scene and camera trajectory.
    Simgen,
    /// Initialization followed by end-to-end training.
    Train,
    /// Pose accuracy on the test views.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use rendered scene coordinates instead of a network.
        #[arg(long)]
        oracle: bool,
    },
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.set_mode(mode);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))
}

pub const SCENE_FILE: &str = "scene.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub fn simgen(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let (scene, trajectory) = scene_and_trajectory(cfg)?;
    create_out(cfg)?;
    save_json(&cfg.out.join(SCENE_FILE), SCENE_FORMAT, &scene).map_err(|e| CliError::Io(e.to_string()))?;
    save_json(&cfg.out.join(TRAJECTORY_FILE), TRAJECTORY_FORMAT, &trajectory)
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn run_gradcheck(cfg: &RunConfig, instances: usize, inject_fault: bool) -> Result<Vec<gradcheck::CheckResult>, CliError> {
    let results = gradcheck::run_checks(cfg.seed, instances, inject_fault);
    create_out(cfg)?;
    write(cfg.out.join(GRADCHECK_FILE), &gradcheck::report_csv(&results))?;
    Ok(results)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.common.resolve()?;
    if cfg.workers > 0 {
        // a pool that is already set up (tests, repeated calls) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match &cli.command {
        Command::Gradcheck { instances, inject_fault } => {
            let results = run_gradcheck(&cfg, *instances, *inject_fault)?;
            for r in &results {
                println!(
                    "{:<32} max error {:.3e} (tolerance {:.0e}) {}",
                    r.name,
                    r.max_error,
                    r.tolerance,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::Simgen => {
            simgen(&cfg)?;
            println!("wrote {} and {}", cfg.out.join(SCENE_FILE).display(), cfg.out.join(TRAJECTORY_FILE).display());
        }
        Command::Train => {
            let report = train::train(&cfg)?;
            println!(
                "trained {} iterations ({} skipped); final checkpoint {}",
                report.curve.len(),
                report.skipped,
                report.final_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, oracle } => {
            let report = eval::eval(&cfg, checkpoint.as_deref(), *oracle)?;
            print!("{}", eval::summary_csv(&report));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
