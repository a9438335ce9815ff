//! Subcommand implementations and the error → exit-code contract.
//!
//! Exit codes are stable: 0 success, 1 numerical failure (a solve
//! diverged, initialization found no model, a self-check failed), 2 usage
//! or I/O failure (bad flags or config, unreadable or unwritable files).

use crate::pipeline::{ground_truth_trajectory, run_pipeline, PipelineError, RunSummary};
use crate::report::{ablate_csv, eval_csv, run_report_json, ArmStats, EvalRow};
use crate::selfcheck::{run_checks, CheckReport};
use annulus_core::config::{ConfigError, RunConfig};
use annulus_core::sim_world::{generate, parse_tracks, write_tracks, Scenario, SimError};
use annulus_core::traj_eval::{ate_rmse, parse_tum, rpe, write_tum, EvalError};
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmdError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("run: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("{n_failed} of {total} self-checks failed")]
    CheckFailed { n_failed: usize, total: usize },
}

impl CmdError {
    /// 1 = the numbers didn't work out, 2 = the invocation or its files.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) | CmdError::Io { .. } => 2,
            CmdError::Sim(e) => match e {
                SimError::InvalidScenario(_) | SimError::Parse { .. } | SimError::Io(_) => 2,
                SimError::EmptyVisibility { .. } | SimError::Camera(_) => 1,
            },
            CmdError::Eval(e) => match e {
                EvalError::Parse { .. } | EvalError::Io(_) => 2,
                _ => 1,
            },
            CmdError::Pipeline(PipelineError::Camera(_)) => 2,
            CmdError::Pipeline(_) => 1,
            CmdError::CheckFailed { .. } => 1,
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| CmdError::Io { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), CmdError> {
    std::fs::write(path, text).map_err(|source| CmdError::Io { path: path.to_path_buf(), source })
}

fn read_text(path: &Path) -> Result<String, CmdError> {
    std::fs::read_to_string(path)
        .map_err(|source| CmdError::Io { path: path.to_path_buf(), source })
}

/// What `simulate` reports on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub n_frames: usize,
    pub n_landmarks: usize,
    pub n_observations: usize,
    pub tracks_path: PathBuf,
    pub gt_path: PathBuf,
}

/// Generates a synthetic track set and writes `tracks.txt` (front-end
/// measurements plus ground truth) and `gt.tum` (ground truth alone, in
/// evaluation format) into `out_dir`.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimSummary, CmdError> {
    let tracks = generate(&Scenario::from_run_config(cfg))?;
    ensure_dir(out_dir)?;
    let tracks_path = out_dir.join("tracks.txt");
    let gt_path = out_dir.join("gt.tum");
    write_tracks(&tracks_path, &tracks)?;
    let gt = ground_truth_trajectory(&tracks).map_err(CmdError::Eval)?;
    write_tum(&gt_path, &gt).map_err(CmdError::Eval)?;
    Ok(SimSummary {
        n_frames: tracks.n_frames(),
        n_landmarks: tracks.n_landmarks(),
        n_observations: tracks.observations.len(),
        tracks_path,
        gt_path,
    })
}

/// Runs the full pipeline over a track file and writes `est.tum` (the
/// estimated camera-in-world trajectory) and `report.json` (run record
/// plus the exact configuration) into `out_dir`.
pub fn cmd_run(cfg: &RunConfig, tracks_path: &Path, out_dir: &Path) -> Result<RunSummary, CmdError> {
    let tracks = parse_tracks(&read_text(tracks_path)?)?;
    let out = run_pipeline(&tracks, cfg)?;
    ensure_dir(out_dir)?;
    write_tum(&out_dir.join("est.tum"), &out.trajectory).map_err(CmdError::Eval)?;
    write_text(&out_dir.join("report.json"), &run_report_json(&out.summary, cfg))?;
    Ok(out.summary)
}

/// Compares an estimated trajectory against ground truth: Sim(3)-aligned
/// absolute error plus relative error over fixed-length segments. Writes
/// `eval.csv` when `out_dir` is given; the caller prints the same CSV.
pub fn cmd_eval(
    est_path: &Path,
    gt_path: &Path,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<EvalRow, CmdError> {
    let est = parse_tum(&read_text(est_path)?)?;
    let gt = parse_tum(&read_text(gt_path)?)?;
    let ate_m = ate_rmse(&est, &gt, cfg.eval.assoc_tol_s)?;
    let (rpet_percent, rper_deg_m) = rpe(&est, &gt, cfg.eval.assoc_tol_s, cfg.eval.rpe_delta_m)?;
    let row = EvalRow { ate_m, rpet_percent, rper_deg_m };
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join("eval.csv"), &eval_csv(&row))?;
    }
    Ok(row)
}

pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("none", false, false),
    ("point", true, false),
    ("pose", false, true),
    ("both", true, true),
];

/// Paired ablation of the two uncertainty terms: for each seed one track
/// set is generated and all four arms run on it, so arm differences are
/// differences in the estimator, not in the data. A failed arm leaves an
/// empty cell and the sweep continues. Writes `ablation.csv`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    out_dir: &Path,
    n_seeds: usize,
) -> Result<Vec<ArmStats>, CmdError> {
    let mut arms: Vec<ArmStats> = ABLATION_ARMS
        .iter()
        .map(|(label, _, _)| ArmStats { label, ates: Vec::with_capacity(n_seeds) })
        .collect();
    for i in 0..n_seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = cfg.seed.wrapping_add(i as u64);
        let tracks = generate(&Scenario::from_run_config(&seed_cfg))?;
        let gt = ground_truth_trajectory(&tracks).map_err(CmdError::Eval)?;
        for (arm, (_, use_point, use_pose)) in arms.iter_mut().zip(ABLATION_ARMS) {
            let mut arm_cfg = seed_cfg.clone();
            arm_cfg.run.use_point_unc = use_point;
            arm_cfg.run.use_pose_unc = use_pose;
            let ate = run_pipeline(&tracks, &arm_cfg)
                .ok()
                .and_then(|out| ate_rmse(&out.trajectory, &gt, arm_cfg.eval.assoc_tol_s).ok());
            arm.ates.push(ate);
        }
    }
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("ablation.csv"), &ablate_csv(&arms))?;
    Ok(arms)
}

/// Runs the numerical self-test battery. The caller prints the per-check
/// lines; [`CheckReport::all_passed`] decides the exit code.
pub fn cmd_check(cfg: &RunConfig) -> CheckReport {
    run_checks(cfg)
}
