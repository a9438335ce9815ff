//! Report serialization: the run's JSON record and the CSV tables the
//! `eval` and `ablate` subcommands emit. Field order and float formatting
//! are part of the output contract — same inputs, same bytes.

use crate::pipeline::RunSummary;
use annulus_core::config::RunConfig;
use serde::Serialize;

/// Everything a run leaves behind besides the trajectory itself.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport<'a> {
    pub summary: &'a RunSummary,
    pub config: &'a RunConfig,
}

pub fn run_report_json(summary: &RunSummary, config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(&RunReport { summary, config })
        .expect("run report serializes");
    s.push('\n');
    s
}

/// One `eval` row: absolute trajectory error plus relative pose error in
/// its translational and rotational parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub ate_m: f64,
    pub rpet_percent: f64,
    pub rper_deg_m: f64,
}

pub const EVAL_HEADER: &str = "ate_m,rpet_percent,rper_deg_m";

pub fn eval_csv(row: &EvalRow) -> String {
    format!("{EVAL_HEADER}\n{},{},{}\n", row.ate_m, row.rpet_percent, row.rper_deg_m)
}

/// Per-arm ATE statistics over an ablation's seeds. `label` names which
/// uncertainty terms the arm enables.
#[derive(Debug, Clone)]
pub struct ArmStats {
    pub label: &'static str,
    /// One cell per seed; `None` marks a seed whose run failed.
    pub ates: Vec<Option<f64>>,
}

impl ArmStats {
    fn successes(&self) -> Vec<f64> {
        self.ates.iter().filter_map(|a| *a).collect()
    }

    pub fn n_failed(&self) -> usize {
        self.ates.iter().filter(|a| a.is_none()).count()
    }
}

pub const ABLATE_HEADER: &str = "arm,n_ok,n_failed,rms,mean,median,min,max";

/// The ablation table: one row per arm, statistics over the seeds that
/// completed. An arm with no completed seeds gets `nan` cells rather than
/// sinking the whole table.
pub fn ablate_csv(arms: &[ArmStats]) -> String {
    let mut out = String::from(ABLATE_HEADER);
    out.push('\n');
    for arm in arms {
        let ok = arm.successes();
        let (rms, mean, median, min, max) = if ok.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mut sorted = ok.clone();
            sorted.sort_by(f64::total_cmp);
            let rms = (ok.iter().map(|a| a * a).sum::<f64>() / ok.len() as f64).sqrt();
            let mean = ok.iter().sum::<f64>() / ok.len() as f64;
            (rms, mean, sorted[sorted.len() / 2], sorted[0], sorted[sorted.len() - 1])
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            arm.label,
            ok.len(),
            arm.n_failed(),
            rms,
            mean,
            median,
            min,
            max
        ));
    }
    out
}
