//! Two-view structure-from-motion for non-perspective cameras.
//!
//! Everything here works on bearing vectors instead of normalized image
//! coordinates, because for fields of view beyond 180° there is no image
//! plane to normalize onto: a point may legitimately sit behind the
//! camera (z < 0) and still be observed. The epipolar constraint
//! `b_b' E b_a = 0` holds for unit bearings exactly as it does for
//! homogeneous plane coordinates, and the inlier metric becomes the
//! angular distance of the second bearing from its epipolar *plane*
//! (whose image is a curve, not a line, under these cameras).
//!
//! The pieces compose into [`initialize_map`]: RANSAC over the eight-point
//! solver, cheirality-based motion disambiguation (votes on signed ray
//! depths from midpoint triangulation, not on camera-frame z, which may be
//! negative inside the field of view), midpoint triangulation with depth
//! and parallax gates, a two-view refinement, and the monocular gauge
//! convention: first pose is the identity and the baseline has length 1.

use crate::camera::{angle_between, Bearing, CameraModel, Pixel};
use crate::config::{InitConfig, RunConfig};
use crate::map::{Keyframe, Landmark, MapState, Observation};
use crate::se3::Pose;
use crate::solver::solve_global_ba;
use crate::uncertainty::refresh_all_uncertainties;
use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, UnitQuaternion, Vector3, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// A pair of unit bearings observing the same point from two frames.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub bearing_a: Bearing,
    pub bearing_b: Bearing,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error("need at least {need} usable matches, got {got}")]
    TooFewMatches { got: usize, need: usize },
    #[error("constraint matrix is rank-deficient (degenerate geometry, e.g. no translation)")]
    DegenerateConfig,
    #[error("epipolar plane undefined for this bearing")]
    DegenerateEpipolarPlane,
    #[error("no consensus: best inlier ratio {best_ratio:.3} is below the minimum {min_ratio:.3}")]
    NoModel { best_ratio: f64, min_ratio: f64 },
    #[error("cheirality vote could not select a unique motion candidate")]
    AmbiguousCheirality,
    #[error("rays are (near-)parallel")]
    ParallelRays,
    #[error("two-view initialization failed: {reason}")]
    InitFailed { reason: String },
}

/// Fewest landmarks a two-view map may start with.
const MIN_INIT_LANDMARKS: usize = 10;

/// Half-width of the noise-adaptive epipolar gate, in standard deviations
/// of the pair's angular measurement scatter.
const EPIPOLAR_GATE_SIGMAS: f64 = 2.5;

/// Upper median; 0 for an empty slice.
fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Angular inlier gate covering a measured pixel sigma: both bearings of a
/// pair scatter by `sigma_px` converted through the camera's radial
/// projection scale, and the gate opens [`EPIPOLAR_GATE_SIGMAS`] wide.
pub fn noise_gate_rad(cam: &CameraModel, sigma_px: f64) -> f64 {
    EPIPOLAR_GATE_SIGMAS * std::f64::consts::SQRT_2 * sigma_px * cam.radians_per_pixel()
}

/// Least-squares direction of the stacked epipolar constraints, as the
/// eigenvector of AᵀA (9×9) for its smallest eigenvalue. Kept separate
/// from the manifold projection so tests can check it against an
/// independent eigensolver.
fn essential_nullspace(corrs: &[Correspondence]) -> Result<SVector<f64, 9>, InitError> {
    if corrs.len() < 8 {
        return Err(InitError::TooFewMatches { got: corrs.len(), need: 8 });
    }
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for c in corrs {
        let a = c.bearing_a.into_inner();
        let b = c.bearing_b.into_inner();
        let mut row = SVector::<f64, 9>::zeros();
        for j in 0..3 {
            for k in 0..3 {
                // Coefficient of E[(j, k)] in b' E a, row-major.
                row[3 * j + k] = b[j] * a[k];
            }
        }
        ata += row * row.transpose();
    }

    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (lo, second, hi) =
        (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]], eig.eigenvalues[order[8]]);
    // Eigenvalues of AᵀA are squared singular values of A; the solution is
    // unique only if exactly one of them vanishes. The classic failure is
    // pure rotation, where a 3-dimensional family of "essential" matrices
    // fits: every s^∧R satisfies the constraints when there is no
    // translation.
    if hi <= 0.0 || second <= 1e-20 * hi {
        return Err(InitError::DegenerateConfig);
    }
    let _ = lo;
    Ok(eig.eigenvectors.column(order[0]).into_owned())
}

/// Essential matrix from ≥ 8 bearing correspondences: least-squares fit of
/// `b_b' E b_a = 0`, projected onto the essential manifold and normalized
/// to singular values (1, 1, 0) with the largest-magnitude entry positive
/// (the overall scale and sign carry no information).
pub fn eight_point(corrs: &[Correspondence]) -> Result<Matrix3<f64>, InitError> {
    let e = essential_nullspace(corrs)?;
    let raw = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);

    let svd = SVD::new(raw, true, true);
    let (u, v_t, s) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    // nalgebra does not promise sorted singular values.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut proj = Matrix3::zeros();
    for &k in &order[..2] {
        proj += u.column(k) * v_t.row(k);
    }

    let mut sign = 0.0;
    let mut best = -1.0;
    for x in proj.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    Ok(proj * sign)
}

/// Angular distance (radians) of `bearing_b` from the epipolar plane of
/// `bearing_a`, whose normal is `E·bearing_a`. Invariant to rescaling E.
pub fn epipolar_angular_error(e: &Matrix3<f64>, c: &Correspondence) -> Result<f64, InitError> {
    let n = e * c.bearing_a.into_inner();
    let nn = n.norm();
    if nn < 1e-12 {
        return Err(InitError::DegenerateEpipolarPlane);
    }
    let s = (c.bearing_b.dot(&n).abs() / nn).clamp(0.0, 1.0);
    Ok(s.asin())
}

/// Consensus result of [`ransac_essential`].
#[derive(Debug, Clone)]
pub struct RansacEssential {
    pub essential: Matrix3<f64>,
    /// Per-correspondence inlier flags under the final model.
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    /// Hypotheses actually evaluated (≤ the configured budget).
    pub iterations: usize,
}

/// Squared-sine form of the angular gate: `asin(|b·n|/‖n‖) < t` becomes
/// `(b·n)² < sin²(t)·‖n‖²`, which scores a correspondence without the
/// division, square root, or arcsine of [`epipolar_angular_error`]. A gate
/// at or beyond π/2 admits everything, matching the arcsine's range.
fn sin2_gate(thresh: f64) -> f64 {
    if thresh < std::f64::consts::FRAC_PI_2 {
        let s = thresh.sin();
        s * s
    } else {
        f64::INFINITY
    }
}

#[inline]
fn is_inlier(e: &Matrix3<f64>, c: &Correspondence, gate2: f64) -> bool {
    let n = e * c.bearing_a.into_inner();
    let nn2 = n.norm_squared();
    // An undefined epipolar plane (bearing at the epipole) is simply not
    // an inlier; it is not an error of the consensus loop.
    if nn2 < 1e-24 {
        return false;
    }
    let d = c.bearing_b.dot(&n);
    d * d < gate2 * nn2
}

/// Allocation-free consensus count for the hypothesis loop.
fn inlier_count(e: &Matrix3<f64>, corrs: &[Correspondence], thresh: f64) -> usize {
    let gate2 = sin2_gate(thresh);
    corrs.iter().filter(|c| is_inlier(e, c, gate2)).count()
}

fn inlier_mask(e: &Matrix3<f64>, corrs: &[Correspondence], thresh: f64) -> (Vec<bool>, usize) {
    let gate2 = sin2_gate(thresh);
    let mut mask = vec![false; corrs.len()];
    let mut count = 0;
    for (i, c) in corrs.iter().enumerate() {
        if is_inlier(e, c, gate2) {
            mask[i] = true;
            count += 1;
        }
    }
    (mask, count)
}

/// Hypothesis count that finds an all-inlier sample with 99% confidence at
/// the observed inlier ratio.
fn adaptive_iterations(n_inliers: usize, n: usize) -> usize {
    let w = n_inliers as f64 / n as f64;
    let p_good = w.powi(8);
    if p_good <= 0.0 {
        return usize::MAX;
    }
    if p_good >= 1.0 {
        return 1;
    }
    // ln_1p keeps ln(1 - p) nonzero for p below machine epsilon, where
    // `(1.0 - p).ln()` would round to zero and collapse the bound to 1.
    let needed = (0.01f64.ln() / (-p_good).ln_1p()).ceil();
    if needed >= usize::MAX as f64 {
        usize::MAX
    } else {
        needed.max(1.0) as usize
    }
}

fn sample_distinct(rng: &mut ChaCha12Rng, n: usize, out: &mut [usize; 8]) {
    let mut filled = 0;
    while filled < 8 {
        let i = rng.random_range(0..n);
        if !out[..filled].contains(&i) {
            out[filled] = i;
            filled += 1;
        }
    }
}

/// RANSAC over [`eight_point`] with the angular inlier metric.
///
/// Deterministic given (data, seed, cfg): hypotheses are scored by inlier
/// count, a strictly better count replaces the incumbent (ties keep the
/// earlier hypothesis), and the budget shrinks adaptively to the 99%
/// confidence bound for the best ratio seen so far. The winning model is
/// refit on its inliers, keeping the refit only if it does not lose any.
pub fn ransac_essential(
    corrs: &[Correspondence],
    cfg: &InitConfig,
    seed: u64,
) -> Result<RansacEssential, InitError> {
    let n = corrs.len();
    if n < 8 {
        return Err(InitError::TooFewMatches { got: n, need: 8 });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut budget = cfg.ransac_iters.max(1);
    let mut iterations = 0;
    let mut sample = [0usize; 8];
    let mut subset = [Correspondence {
        bearing_a: Bearing::new_unchecked(Vector3::z()),
        bearing_b: Bearing::new_unchecked(Vector3::z()),
    }; 8];

    while iterations < budget {
        iterations += 1;
        sample_distinct(&mut rng, n, &mut sample);
        for (slot, &i) in subset.iter_mut().zip(&sample) {
            *slot = corrs[i];
        }
        let Ok(e) = eight_point(&subset) else { continue };
        let count = inlier_count(&e, corrs, cfg.ransac_thresh_rad);
        if best.as_ref().is_none_or(|(bc, _)| count > *bc) {
            best = Some((count, e));
            budget = budget.min(adaptive_iterations(count, n).max(iterations));
        }
    }

    let Some((count, e)) = best else {
        return Err(InitError::NoModel { best_ratio: 0.0, min_ratio: cfg.min_inlier_ratio });
    };
    let (mask, count) = {
        let (mask, _) = inlier_mask(&e, corrs, cfg.ransac_thresh_rad);
        debug_assert_eq!(mask.iter().filter(|b| **b).count(), count);
        (mask, count)
    };

    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, keep)| **keep)
        .map(|(c, _)| *c)
        .collect();
    let (essential, inliers, n_inliers) = match eight_point(&inliers) {
        Ok(refit) => {
            let (m2, c2) = inlier_mask(&refit, corrs, cfg.ransac_thresh_rad);
            if c2 >= count {
                (refit, m2, c2)
            } else {
                (e, mask, count)
            }
        }
        Err(_) => (e, mask, count),
    };

    let ratio = n_inliers as f64 / n as f64;
    if ratio < cfg.min_inlier_ratio {
        return Err(InitError::NoModel { best_ratio: ratio, min_ratio: cfg.min_inlier_ratio });
    }
    Ok(RansacEssential { essential, inliers, n_inliers, iterations })
}

/// Midpoint of the common perpendicular of the two observation rays, with
/// the signed ray parameters (world units along each unit ray). The
/// parameters — not camera-frame z — are what cheirality must test when
/// the field of view exceeds 180°.
pub fn triangulate_midpoint(
    t_a: &Pose,
    t_b: &Pose,
    b_a: &Bearing,
    b_b: &Bearing,
) -> Result<(Vector3<f64>, f64, f64), InitError> {
    let o_a = t_a.center();
    let o_b = t_b.center();
    let d_a = (t_a.rotation.inverse() * *b_a).into_inner();
    let d_b = (t_b.rotation.inverse() * *b_b).into_inner();

    let w = o_a - o_b;
    let bdot = d_a.dot(&d_b);
    let denom = 1.0 - bdot * bdot;
    // sin²(angle between rays); the gate matches a ~1e-6 rad cutoff.
    if denom <= 1e-12 {
        return Err(InitError::ParallelRays);
    }
    let s = (bdot * d_b.dot(&w) - d_a.dot(&w)) / denom;
    let t = d_b.dot(&w) + s * bdot;
    let pa = o_a + s * d_a;
    let pb = o_b + t * d_b;
    Ok(((pa + pb) * 0.5, s, t))
}

/// Relative pose `T_b←a` (unit baseline) from an essential matrix, picking
/// among the four (R, ±t) candidates the one that places strictly the most
/// correspondences at positive signed depth along both rays.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    corrs: &[Correspondence],
) -> Result<Pose, InitError> {
    if corrs.is_empty() {
        return Err(InitError::TooFewMatches { got: 0, need: 1 });
    }
    let svd = SVD::new(*e, true, true);
    let (u0, v_t, s) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));

    // Columns ordered by descending singular value, then made proper
    // rotations (the sign of E is meaningless, so these flips are free).
    let mut u = Matrix3::from_columns(&[
        u0.column(order[0]),
        u0.column(order[1]),
        u0.column(order[2]),
    ]);
    let v0 = v_t.transpose();
    let mut v = Matrix3::from_columns(&[
        v0.column(order[0]),
        v0.column(order[1]),
        v0.column(order[2]),
    ]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }

    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t = u.column(2).into_owned();

    let pose_a = Pose::identity();
    let mut best: Option<(usize, Pose)> = None;
    let mut tied = false;
    for r in [r1, r2] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        for t in [t, -t] {
            let cand = Pose::from_parts(q, t);
            let mut votes = 0;
            for c in corrs {
                if let Ok((_, da, db)) =
                    triangulate_midpoint(&pose_a, &cand, &c.bearing_a, &c.bearing_b)
                {
                    if da > 0.0 && db > 0.0 {
                        votes += 1;
                    }
                }
            }
            match &best {
                Some((bv, _)) if votes > *bv => {
                    best = Some((votes, cand));
                    tied = false;
                }
                Some((bv, _)) if votes == *bv => tied = true,
                None => best = Some((votes, cand)),
                _ => {}
            }
        }
    }
    let (votes, pose) = best.unwrap();
    if tied || votes == 0 {
        return Err(InitError::AmbiguousCheirality);
    }
    Ok(pose)
}

/// Identity of one of the two frames entering initialization.
#[derive(Debug, Clone, Copy)]
pub struct InitFrame {
    pub frame_id: u64,
    pub timestamp: f64,
}

/// A tracked point observed in both frames.
#[derive(Debug, Clone, Copy)]
pub struct InitMatch {
    /// Track id; becomes the landmark id in the initialized map.
    pub track: u64,
    pub pixel_a: Pixel,
    pub pixel_b: Pixel,
    pub sigma_px: f64,
}

/// Builds the initial two-keyframe map: RANSAC essential estimation on the
/// unprojected matches, motion disambiguation, midpoint triangulation with
/// positive-depth and parallax gates, a two-view refinement, baseline
/// renormalization to exactly 1 (the monocular scale gauge; the first
/// keyframe is the identity), and an initial uncertainty pass.
///
/// Landmark ids are the match track ids; keyframe ids are 0 and 1.
pub fn initialize_map(
    frame_a: InitFrame,
    frame_b: InitFrame,
    matches: &[InitMatch],
    cam: &CameraModel,
    cfg: &RunConfig,
) -> Result<MapState, InitError> {
    let mut corrs = Vec::with_capacity(matches.len());
    let mut kept = Vec::with_capacity(matches.len());
    for m in matches {
        if let (Ok(ba), Ok(bb)) = (cam.unproject(&m.pixel_a), cam.unproject(&m.pixel_b)) {
            corrs.push(Correspondence { bearing_a: ba, bearing_b: bb });
            kept.push(m);
        }
    }
    if corrs.len() < 8 {
        return Err(InitError::TooFewMatches { got: corrs.len(), need: 8 });
    }

    // The configured epipolar gate is a floor; when the matches carry a
    // measured pixel sigma, widen it to cover that scatter, converted to
    // radians through the camera's radial projection scale. Both bearings
    // of a pair are noisy, hence the √2.
    let sigmas: Vec<f64> = kept.iter().map(|m| m.sigma_px).filter(|s| *s > 0.0).collect();
    let init_cfg = InitConfig {
        ransac_thresh_rad: cfg
            .init
            .ransac_thresh_rad
            .max(noise_gate_rad(cam, median(&sigmas))),
        ..cfg.init.clone()
    };
    let ransac = match ransac_essential(&corrs, &init_cfg, cfg.seed) {
        Ok(r) => r,
        Err(e @ (InitError::NoModel { .. } | InitError::DegenerateConfig)) => {
            return Err(InitError::InitFailed { reason: e.to_string() });
        }
        Err(e) => return Err(e),
    };
    let inlier_corrs: Vec<Correspondence> = corrs
        .iter()
        .zip(&ransac.inliers)
        .filter(|(_, keep)| **keep)
        .map(|(c, _)| *c)
        .collect();
    let rel = match decompose_essential(&ransac.essential, &inlier_corrs) {
        Ok(p) => p,
        Err(e) => return Err(InitError::InitFailed { reason: e.to_string() }),
    };

    let pose_a = Pose::identity();
    let min_parallax = cfg.init.min_parallax_deg.to_radians();
    let mut map = MapState::new();
    map.insert_keyframe(Keyframe::new(0, frame_a.frame_id, frame_a.timestamp, pose_a));
    map.insert_keyframe(Keyframe::new(1, frame_b.frame_id, frame_b.timestamp, rel));

    for ((m, c), keep) in kept.iter().zip(&corrs).zip(&ransac.inliers) {
        if !keep || map.landmark(m.track).is_some() {
            continue;
        }
        let Ok((point, da, db)) = triangulate_midpoint(&pose_a, &rel, &c.bearing_a, &c.bearing_b)
        else {
            continue;
        };
        if da <= 0.0 || db <= 0.0 {
            continue;
        }
        let ray_a = (pose_a.rotation.inverse() * c.bearing_a).into_inner();
        let ray_b = (rel.rotation.inverse() * c.bearing_b).into_inner();
        if angle_between(&ray_a, &ray_b) < min_parallax {
            continue;
        }
        map.insert_landmark(Landmark::new(m.track, point));
        map.insert_observation(0, m.track, Observation { pixel: m.pixel_a, sigma_px: m.sigma_px });
        map.insert_observation(1, m.track, Observation { pixel: m.pixel_b, sigma_px: m.sigma_px });
    }

    if map.n_landmarks() < MIN_INIT_LANDMARKS {
        return Err(InitError::InitFailed {
            reason: format!(
                "only {} of {} inlier matches survived the depth/parallax gates",
                map.n_landmarks(),
                ransac.n_inliers
            ),
        });
    }

    if let Err(e) = solve_global_ba(
        &mut map,
        cam,
        &cfg.ba,
        &cfg.unc,
        cfg.run.use_point_unc,
        cfg.run.use_pose_unc,
    ) {
        return Err(InitError::InitFailed { reason: format!("two-view refinement failed: {e}") });
    }

    // The refinement anchors only the first keyframe, which leaves the
    // monocular scale free; put the baseline back to exactly 1 by scaling
    // about the first camera center (the origin).
    let c1 = map.keyframe(1).unwrap().pose.center();
    let norm = c1.norm();
    if norm <= 1e-9 {
        return Err(InitError::InitFailed {
            reason: "baseline collapsed during refinement".to_string(),
        });
    }
    let s = 1.0 / norm;
    let kf1 = map.keyframe_mut(1).unwrap();
    let r1 = kf1.pose.rotation;
    kf1.pose.translation = -(r1 * (c1 * s));
    let lm_ids: Vec<u64> = map.landmark_ids().collect();
    for id in lm_ids {
        map.landmark_mut(id).unwrap().position *= s;
    }

    refresh_all_uncertainties(&mut map, cam, &cfg.unc);
    Ok(map)
}
