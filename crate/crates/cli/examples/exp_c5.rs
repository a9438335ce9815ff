use annulus_core::config::InitConfig;
use annulus_core::init_sfm::{decompose_essential, ransac_essential, Correspondence};
use annulus_core::se3::Pose;
use annulus_core::camera::angle_between;
use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut ok = 0usize;
    let n_runs = 100;
    for seed in 0..n_runs {
        let mut rng = ChaCha12Rng::seed_from_u64(900 + seed);
        let axis = UnitVector3::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let angle: f64 = rng.random_range(-0.6..0.6);
        let t = Vector3::new(
            rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let rel = Pose::from_parts(UnitQuaternion::from_axis_angle(&axis, angle), t);
        let mut corrs = Vec::with_capacity(200);
        while corrs.len() < 80 {
            let p = Vector3::new(
                rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let (qa, qb) = (p, rel.act(&p));
            if qa.norm() < 1.0 || qb.norm() < 1.0 { continue; }
            corrs.push(Correspondence {
                bearing_a: UnitVector3::new_normalize(qa),
                bearing_b: UnitVector3::new_normalize(qb),
            });
        }
        while corrs.len() < 200 {
            let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if a.norm() < 1e-3 || b.norm() < 1e-3 { continue; }
            corrs.push(Correspondence {
                bearing_a: UnitVector3::new_normalize(a),
                bearing_b: UnitVector3::new_normalize(b),
            });
        }
        // interleave outliers deterministically
        for i in 0..corrs.len() {
            let j = rng.random_range(0..corrs.len());
            corrs.swap(i, j);
        }
        let cfg = InitConfig { ransac_iters: 20_000, ..InitConfig::default() };
        let Ok(model) = ransac_essential(&corrs, &cfg, 1000 + seed) else { continue };
        let inl: Vec<Correspondence> = corrs.iter().zip(&model.inliers).filter(|(_, k)| **k).map(|(c, _)| *c).collect();
        let Ok(got) = decompose_essential(&model.essential, &inl) else { continue };
        let rot_err = got.rotation.angle_to(&rel.rotation).to_degrees();
        let dir_err = angle_between(&got.translation.normalize(), &rel.translation.normalize()).to_degrees();
        if rot_err < 0.1 && dir_err < 0.5 { ok += 1; }
    }
    println!("C5: {ok}/{n_runs} in {:.2}s", t0.elapsed().as_secs_f64());
}
