//! Numerical self-test battery behind the `check` subcommand: quick,
//! seeded spot checks of the geometry and uncertainty machinery against
//! independent references (finite differences, Monte Carlo sampling,
//! brute-force accumulation). Deeper versions of the same comparisons
//! live in the test suite; these exist so a deployment can be sanity
//! checked from the shipped binary.

use annulus_core::camera::{angle_between, CameraModel};
use annulus_core::config::RunConfig;
use annulus_core::init_sfm::{
    decompose_essential, ransac_essential, triangulate_midpoint, Correspondence,
};
use annulus_core::map::{Keyframe, Landmark, MapState, Observation};
use annulus_core::se3::{jacobian_pose_perturbation, Pose, Twist};
use annulus_core::solver::{solve_tracking, TrackMatch};
use annulus_core::uncertainty::{
    point_covariance, project_point_uncertainty, project_pose_uncertainty, MeasurementNoise,
    SpdOps,
};
use nalgebra::{Matrix2, Matrix3, Matrix6, UnitQuaternion, UnitVector3, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checks: Vec<Check>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn n_failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

/// Runs every check. The battery itself uses the two built-in camera
/// presets so the numerical checks are independent of the configured
/// camera; only `camera_build` exercises the configuration.
pub fn run_checks(cfg: &RunConfig) -> CheckReport {
    let seed = cfg.seed;
    let checks = vec![
        camera_build(cfg),
        projection_jacobian_fd(seed),
        pose_jacobian_fd(seed),
        unproject_project_round_trip(seed),
        se3_compose_inverse_identity(seed),
        point_covariance_matches_brute_force(seed),
        point_uncertainty_propagation_monte_carlo(seed),
        pose_uncertainty_propagation_monte_carlo(seed),
        spd_inverse_round_trip(seed),
        triangulation_two_view_exact(seed),
        essential_decomposition_recovers_motion(seed),
        tracking_recovers_perturbed_pose(seed),
    ];
    CheckReport { checks }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn presets() -> [CameraModel; 2] {
    [CameraModel::wide_annular_default(), CameraModel::fisheye_default()]
}

/// Uniform direction inside the camera's field of view, full elevation
/// interval included, at a random range.
fn random_in_fov(cam: &CameraModel, rng: &mut impl Rng) -> Vector3<f64> {
    let (e_min, e_max) = cam.elevation_range();
    let margin = 1e-3 * (e_max - e_min);
    let elev: f64 = rng.random_range(e_min + margin..e_max - margin);
    let azim: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let range: f64 = rng.random_range(0.5..20.0);
    Vector3::new(elev.cos() * azim.cos(), elev.cos() * azim.sin(), elev.sin()) * range
}

fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = UnitVector3::new_normalize(Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let angle: f64 = rng.random_range(-1.0..1.0);
    let t = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    Pose::from_parts(UnitQuaternion::from_axis_angle(&axis, angle), t)
}

fn normal3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

fn normal6(rng: &mut impl Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| StandardNormal.sample(rng))
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

fn camera_build(cfg: &RunConfig) -> Check {
    match cfg.camera.build() {
        Ok(cam) => check(
            "camera_build",
            true,
            format!("{:?} camera, image {:?}", cam.kind(), cam.image_size()),
        ),
        Err(e) => check("camera_build", false, format!("{e}")),
    }
}

fn projection_jacobian_fd(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x01);
    let mut worst = 0.0f64;
    for cam in presets() {
        let mut done = 0;
        while done < 200 {
            let p = random_in_fov(&cam, &mut rng);
            let Ok(j) = cam.jacobian_project(&p) else { continue };
            done += 1;
            let mut fd = nalgebra::Matrix2x3::<f64>::zeros();
            let h = 1e-6 * p.norm().max(1.0);
            let mut ok = true;
            for k in 0..3 {
                let mut dp = Vector3::zeros();
                dp[k] = h;
                let (Ok(hi), Ok(lo)) = (cam.project(&(p + dp)), cam.project(&(p - dp))) else {
                    ok = false;
                    break;
                };
                fd[(0, k)] = (hi.u - lo.u) / (2.0 * h);
                fd[(1, k)] = (hi.v - lo.v) / (2.0 * h);
            }
            if !ok {
                done -= 1;
                continue;
            }
            worst = worst.max((j - fd).norm() / j.norm().max(1e-12));
        }
    }
    check(
        "projection_jacobian_fd",
        worst < 1e-5,
        format!("worst relative error {worst:.3e} (tol 1e-5)"),
    )
}

fn pose_jacobian_fd(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x02);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let pose = random_pose(&mut rng);
        let q = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let p = pose.inverse().act(&q); // world point mapping to q
        let j = jacobian_pose_perturbation(&pose, &p);
        let h = 1e-6;
        let mut fd = nalgebra::Matrix3x6::<f64>::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let hi = pose.perturbed(&Twist(d)).act(&p);
            let lo = pose.perturbed(&Twist(-d)).act(&p);
            fd.set_column(k, &((hi - lo) / (2.0 * h)));
        }
        done += 1;
        worst = worst.max((j - fd).norm() / j.norm().max(1e-12));
    }
    check(
        "pose_jacobian_fd",
        worst < 1e-5,
        format!("worst relative error {worst:.3e} (tol 1e-5)"),
    )
}

fn unproject_project_round_trip(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x03);
    let mut worst = 0.0f64;
    for cam in presets() {
        let mut done = 0;
        while done < 200 {
            let p = random_in_fov(&cam, &mut rng);
            let Ok(px) = cam.project(&p) else { continue };
            let Ok(b) = cam.unproject(&px) else { continue };
            done += 1;
            worst = worst.max(angle_between(&p.normalize(), &b));
        }
    }
    check(
        "unproject_project_round_trip",
        worst < 1e-8,
        format!("worst angular error {worst:.3e} rad (tol 1e-8)"),
    )
}

fn se3_compose_inverse_identity(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x04);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let p = normal3(&mut rng) * 3.0;
        // (a∘b)(p) == a(b(p))
        worst = worst.max((a.compose(&b).act(&p) - a.act(&b.act(&p))).norm());
        // a⁻¹(a(p)) == p
        worst = worst.max((a.inverse().act(&a.act(&p)) - p).norm());
        // exp(log(a)) == a, as an action
        if let Ok(xi) = a.log() {
            worst = worst.max((Pose::exp(&xi).act(&p) - a.act(&p)).norm());
        }
    }
    check(
        "se3_compose_inverse_identity",
        worst < 1e-9,
        format!("worst action mismatch {worst:.3e} (tol 1e-9)"),
    )
}

fn point_covariance_matches_brute_force(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x05);
    let residuals: Vec<Vector3<f64>> = (0..50).map(|_| normal3(&mut rng) * 0.1).collect();
    let got = point_covariance(&residuals, 1.0);
    let mut want = Matrix3::zeros();
    for r in &residuals {
        want += r * r.transpose();
    }
    want /= residuals.len() as f64 - 1.0;
    let err = (got - want).norm() / want.norm();
    check(
        "point_covariance_matches_brute_force",
        err < 1e-12,
        format!("relative error {err:.3e} (tol 1e-12)"),
    )
}

fn point_uncertainty_propagation_monte_carlo(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x06);
    let cam = CameraModel::fisheye_default();
    let pose = random_pose(&mut rng);
    let point = pose.inverse().act(&random_in_fov(&cam, &mut rng));
    let sigma = {
        let m = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 0.01;
        (m * m.transpose() + Matrix3::identity() * 1e-5).symmetrize_clamp()
    };
    let predicted =
        match project_point_uncertainty(&pose, &cam, &point, &sigma, &MeasurementNoise::isotropic(0.0)) {
            Ok(m) => m,
            Err(e) => return check("point_uncertainty_propagation_monte_carlo", false, format!("{e}")),
        };
    let chol = sigma.cholesky().expect("SPD sample covariance");
    let center = cam.project(&pose.act(&point)).expect("center projects");
    let n = 20_000;
    let mut acc = Matrix2::zeros();
    let mut used = 0usize;
    for _ in 0..n {
        let sample = point + chol.l() * normal3(&mut rng);
        if let Ok(px) = cam.project(&pose.act(&sample)) {
            let d = nalgebra::Vector2::new(px.u - center.u, px.v - center.v);
            acc += d * d.transpose();
            used += 1;
        }
    }
    let sampled = acc / used.max(1) as f64;
    let err = (sampled - predicted).norm() / predicted.norm().max(1e-18);
    check(
        "point_uncertainty_propagation_monte_carlo",
        err < 0.10 && used > n / 2,
        format!("{used} samples, relative Frobenius error {err:.3e} (tol 0.10)"),
    )
}

fn pose_uncertainty_propagation_monte_carlo(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x07);
    let cam = CameraModel::fisheye_default();
    let pose = random_pose(&mut rng);
    let point = pose.inverse().act(&random_in_fov(&cam, &mut rng));
    let sigma = {
        let m = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 0.002;
        (m * m.transpose() + Matrix6::identity() * 1e-7).symmetrize_clamp()
    };
    let predicted =
        match project_pose_uncertainty(&pose, &cam, &point, &sigma, &MeasurementNoise::isotropic(0.0)) {
            Ok(m) => m,
            Err(e) => return check("pose_uncertainty_propagation_monte_carlo", false, format!("{e}")),
        };
    let chol = sigma.cholesky().expect("SPD pose covariance");
    let center = cam.project(&pose.act(&point)).expect("center projects");
    let n = 20_000;
    let mut acc = Matrix2::zeros();
    let mut used = 0usize;
    for _ in 0..n {
        let xi = Twist(chol.l() * normal6(&mut rng));
        if let Ok(px) = cam.project(&pose.perturbed(&xi).act(&point)) {
            let d = nalgebra::Vector2::new(px.u - center.u, px.v - center.v);
            acc += d * d.transpose();
            used += 1;
        }
    }
    let sampled = acc / used.max(1) as f64;
    let err = (sampled - predicted).norm() / predicted.norm().max(1e-18);
    check(
        "pose_uncertainty_propagation_monte_carlo",
        err < 0.10 && used > n / 2,
        format!("{used} samples, relative Frobenius error {err:.3e} (tol 0.10)"),
    )
}

fn spd_inverse_round_trip(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x08);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let a = (m * m.transpose() + Matrix6::identity() * 1e-6).symmetrize_clamp();
        let err = (a * a.invert_spd() - Matrix6::identity()).norm();
        worst = worst.max(err);
    }
    check(
        "spd_inverse_round_trip",
        worst < 1e-6,
        format!("worst ‖A·A⁻¹ − I‖ = {worst:.3e} (tol 1e-6)"),
    )
}

fn triangulation_two_view_exact(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x09);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let t_a = random_pose(&mut rng);
        let t_b = random_pose(&mut rng);
        let p = normal3(&mut rng) * 4.0;
        let (qa, qb) = (t_a.act(&p), t_b.act(&p));
        if qa.norm() < 0.5 || qb.norm() < 0.5 {
            continue;
        }
        let b_a = UnitVector3::new_normalize(qa);
        let b_b = UnitVector3::new_normalize(qb);
        let Ok((q, s, t)) = triangulate_midpoint(&t_a, &t_b, &b_a, &b_b) else { continue };
        done += 1;
        if s <= 0.0 || t <= 0.0 {
            worst = f64::INFINITY;
            continue;
        }
        worst = worst.max((q - p).norm());
    }
    check(
        "triangulation_two_view_exact",
        worst < 1e-9,
        format!("worst reconstruction error {worst:.3e} (tol 1e-9)"),
    )
}

fn essential_decomposition_recovers_motion(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0a);
    // Camera b is camera a translated and yawed; world points surround both.
    let rel_true = Pose::from_parts(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.2),
        Vector3::new(0.6, -0.2, 0.3).normalize(),
    );
    let mut corrs = Vec::new();
    while corrs.len() < 120 {
        let p = normal3(&mut rng) * 5.0;
        let (qa, qb) = (p, rel_true.act(&p));
        if qa.norm() < 1.0 || qb.norm() < 1.0 {
            continue;
        }
        corrs.push(Correspondence {
            bearing_a: UnitVector3::new_normalize(qa),
            bearing_b: UnitVector3::new_normalize(qb),
        });
    }
    let cfg = annulus_core::config::InitConfig::default();
    let model = match ransac_essential(&corrs, &cfg, seed ^ 0x0a) {
        Ok(m) => m,
        Err(e) => return check("essential_decomposition_recovers_motion", false, format!("{e}")),
    };
    let rel = match decompose_essential(&model.essential, &corrs) {
        Ok(p) => p,
        Err(e) => return check("essential_decomposition_recovers_motion", false, format!("{e}")),
    };
    let rot_err = rel.rotation.angle_to(&rel_true.rotation);
    let dir_err = angle_between(&rel.translation.normalize(), &rel_true.translation.normalize());
    check(
        "essential_decomposition_recovers_motion",
        rot_err < 1e-6 && dir_err < 1e-6,
        format!("rotation error {rot_err:.3e} rad, direction error {dir_err:.3e} rad (tol 1e-6)"),
    )
}

fn tracking_recovers_perturbed_pose(seed: u64) -> Check {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0b);
    let cam = CameraModel::fisheye_default();
    let pose_true = random_pose(&mut rng);
    let mut map = MapState::default();
    map.insert_keyframe(Keyframe::new(0, 0, 0.0, pose_true));
    let mut matches = Vec::new();
    let mut lm = 0u64;
    while matches.len() < 40 {
        let p = pose_true.inverse().act(&random_in_fov(&cam, &mut rng));
        let Ok(px) = cam.project(&pose_true.act(&p)) else { continue };
        map.insert_landmark(Landmark::new(lm, p));
        map.insert_observation(0, lm, Observation { pixel: px, sigma_px: 0.5 });
        matches.push(TrackMatch { lm, pixel: px, sigma_px: 0.5 });
        lm += 1;
    }
    let delta = Twist(normal6(&mut rng) * 0.01);
    let initial = pose_true.perturbed(&delta);
    let cfg = annulus_core::config::BaConfig::default();
    match solve_tracking(&cam, &map, &initial, &matches, &cfg, 0.5, false) {
        Ok(res) => {
            let rot_err = res.pose.rotation.angle_to(&pose_true.rotation);
            let t_err = (res.pose.translation - pose_true.translation).norm();
            check(
                "tracking_recovers_perturbed_pose",
                rot_err < 1e-7 && t_err < 1e-7,
                format!("rotation error {rot_err:.3e} rad, translation error {t_err:.3e} (tol 1e-7)"),
            )
        }
        Err(e) => check("tracking_recovers_perturbed_pose", false, format!("{e}")),
    }
}
