use annulus_cli::pipeline::{ground_truth_trajectory, run_pipeline};
use annulus_core::config::RunConfig;
use annulus_core::sim_world::{generate, Scenario};
use annulus_core::traj_eval::ate_rmse;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut wins = 0usize;
    let (mut sum_both, mut sum_none) = (0.0f64, 0.0f64);
    let n_seeds = 20u64;
    for i in 0..n_seeds {
        let mut cfg = RunConfig::default();
        cfg.seed = 4242 + i;
        let tracks = generate(&Scenario::from_run_config(&cfg)).expect("scenario");
        let gt = ground_truth_trajectory(&tracks).unwrap();
        let mut ates = [0.0f64; 2];
        for (k, (up, ur)) in [(false, false), (true, true)].iter().enumerate() {
            let mut arm = cfg.clone();
            arm.run.use_point_unc = *up;
            arm.run.use_pose_unc = *ur;
            let out = match run_pipeline(&tracks, &arm) {
                Ok(o) => o,
                Err(e) => { println!("seed {i} arm {k} FAILED: {e}"); ates[k] = f64::NAN; continue; }
            };
            ates[k] = ate_rmse(&out.trajectory, &gt, arm.eval.assoc_tol_s).unwrap();
        }
        let [none, both] = ates;
        if both < none { wins += 1; }
        sum_none += none;
        sum_both += both;
        println!("seed {i}: none {none:.5}  both {both:.5}  {}", if both < none { "WIN" } else { "lose" });
    }
    println!(
        "wins {wins}/{n_seeds}  mean none {:.5}  mean both {:.5}  ({:.1}s)",
        sum_none / n_seeds as f64,
        sum_both / n_seeds as f64,
        t0.elapsed().as_secs_f64()
    );
}
