//! `annulus` — uncertainty-aware wide-FoV SLAM backend.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.

use annulus_cli::commands::{
    cmd_ablate, cmd_check, cmd_eval, cmd_run, cmd_simulate, CmdError,
};
use annulus_core::config::RunConfig;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "annulus",
    version,
    about = "Uncertainty-aware SLAM backend for wide-FoV cameras",
    after_help = "Exit codes: 0 success, 1 numerical failure, 2 usage/IO error."
)]
struct Cli {
    /// JSON configuration file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's random seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory for generated files.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override one config value by dotted path, e.g. --set ba.window=8.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic track set plus its ground-truth trajectory.
    Simulate,
    /// Run the full pipeline (init, tracking, local BA, loop closing) over a track file.
    Run {
        /// Input track file, as written by `simulate`.
        #[arg(long, value_name = "PATH")]
        tracks: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth (CSV row on stdout).
    Eval {
        /// Estimated trajectory (TUM format).
        #[arg(long, value_name = "PATH")]
        est: PathBuf,
        /// Ground-truth trajectory (TUM format).
        #[arg(long, value_name = "PATH")]
        gt: PathBuf,
    },
    /// Run the four uncertainty-toggle arms over shared seeds and tabulate ATE statistics.
    Ablate {
        /// Number of seeds (each arm sees the same track set per seed).
        #[arg(long, default_value_t = 20, value_name = "N")]
        seeds: usize,
    },
    /// Run the numerical self-test battery.
    Check,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CmdError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|source| CmdError::Io { path: path.clone(), source })?,
        None => "{}".to_string(),
    };
    let mut cfg = RunConfig::from_json(&text, &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let cfg = load_config(cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let started = Instant::now();
    match &cli.cmd {
        Cmd::Simulate => {
            let s = cmd_simulate(&cfg, &cli.out)?;
            println!(
                "simulated {} frames, {} landmarks, {} observations",
                s.n_frames, s.n_landmarks, s.n_observations
            );
            println!("tracks: {}", s.tracks_path.display());
            println!("ground truth: {}", s.gt_path.display());
        }
        Cmd::Run { tracks } => {
            let s = cmd_run(&cfg, tracks, &cli.out)?;
            println!(
                "initialized on frames {}–{}, tracked {} frames into {} keyframes / {} landmarks",
                s.init_frame_a, s.init_frame_b, s.n_tracked_frames, s.n_keyframes, s.n_landmarks
            );
            println!("loops closed: {}", s.loops_closed);
            println!("trajectory: {}", cli.out.join("est.tum").display());
            println!("report: {}", cli.out.join("report.json").display());
        }
        Cmd::Eval { est, gt } => {
            let row = cmd_eval(est, gt, &cfg, Some(&cli.out))?;
            print!("{}", annulus_cli::report::eval_csv(&row));
        }
        Cmd::Ablate { seeds } => {
            let arms = cmd_ablate(&cfg, &cli.out, *seeds)?;
            print!("{}", annulus_cli::report::ablate_csv(&arms));
        }
        Cmd::Check => {
            let report = cmd_check(&cfg);
            for c in &report.checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("check {}: {} ({})", c.name, status, c.detail);
            }
            if !report.all_passed() {
                return Err(CmdError::CheckFailed {
                    n_failed: report.n_failed(),
                    total: report.checks.len(),
                });
            }
            println!("all {} checks passed", report.checks.len());
        }
    }
    // Timing is diagnostic, not part of the output contract: stderr only,
    // so the files and stdout stay byte-reproducible.
    eprintln!("done in {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
