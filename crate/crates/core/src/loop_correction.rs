//! Loop-closure proposal, verification and correction.
//!
//! A loop closure pairs the newest keyframe with an old one it appears to
//! revisit. Proposal is purely geometric (spatial proximity plus a minimum
//! index gap so neighbours never qualify); verification fits a relative
//! camera geometry to the paired observations and accepts the pair only if
//! enough of them agree; correction snaps the drifted part of the map onto
//! the verified geometry rigidly, fuses duplicate landmarks, and hands the
//! remaining error to global bundle adjustment.

use crate::camera::{angle_between, CameraModel};
use crate::config::{InitConfig, LoopConfig, RunConfig};
use crate::init_sfm::{
    decompose_essential, noise_gate_rad, ransac_essential, triangulate_midpoint, Correspondence,
};
use crate::map::{KeyframeId, LandmarkId, MapState, Observation};
use crate::se3::Pose;
use crate::solver::{solve_global_ba, SolveError, SolveReport};
use crate::uncertainty::refresh_all_uncertainties;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, SVD};
use thiserror::Error;

/// Minimum usable observation pairs for geometric verification.
pub const MIN_LOOP_MATCHES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum LoopError {
    #[error("loop candidate has {got} usable matches, need at least {need}")]
    TooFewMatches { got: usize, need: usize },
    #[error("loop candidate has not passed verification")]
    NotVerified,
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// A proposed closure between the newest keyframe and an older one.
#[derive(Debug, Clone)]
pub struct LoopCandidate {
    /// The keyframe that just re-entered previously mapped territory.
    pub current_kf: KeyframeId,
    /// The older keyframe it appears to revisit. Never equals `current_kf`.
    pub candidate_kf: KeyframeId,
    /// Landmark pairings `(current-side id, candidate-side id)` backing the
    /// closure. The two ids coincide when the front end kept track identity
    /// through the revisit; they differ when the revisited structure was
    /// mapped a second time under fresh ids.
    pub matches: Vec<(LandmarkId, LandmarkId)>,
    /// Set by [`verify_candidate`] when the pairings pass the geometric gate.
    pub verified: bool,
    /// Relative pose `T_current←candidate` — the world-to-camera poses of a
    /// verified pair satisfy `T_current ≈ rel ∘ T_candidate`, with the
    /// translation in world scale. Present iff `verified`.
    pub relative_pose: Option<Pose>,
}

/// Proposes loop-closure candidates for `current_kf`: keyframes whose optical
/// center lies within `radius_frac` of the trajectory extent and which
/// precede the current keyframe by at least `min_gap` positions, ordered
/// nearest first. An empty result simply means no revisit is plausible.
///
/// Each candidate's matches are seeded with the landmarks both keyframes
/// already observe in common. A caller with an appearance front end may
/// extend them with its own pairings before verification.
pub fn propose_candidates(
    map: &MapState,
    current_kf: KeyframeId,
    cfg: &LoopConfig,
) -> Vec<LoopCandidate> {
    let Some(current) = map.keyframe(current_kf) else {
        return Vec::new();
    };
    let center = current.pose.center();
    let radius = cfg.radius_frac * map.trajectory_extent();

    let ids: Vec<KeyframeId> = map.keyframe_ids().collect();
    let Some(cur_rank) = ids.iter().position(|&id| id == current_kf) else {
        return Vec::new();
    };

    let mut near: Vec<(f64, KeyframeId)> = Vec::new();
    for (rank, &id) in ids.iter().enumerate() {
        if id == current_kf || rank + cfg.min_gap > cur_rank {
            continue;
        }
        let dist = (map.keyframe(id).unwrap().pose.center() - center).norm();
        if dist <= radius {
            near.push((dist, id));
        }
    }
    near.sort_by(|a, b| a.0.total_cmp(&b.0));

    near.into_iter()
        .map(|(_, id)| {
            let matches: Vec<(LandmarkId, LandmarkId)> = map
                .observations_of_keyframe(current_kf)
                .filter(|(lm, _)| map.observation(id, *lm).is_some())
                .map(|(lm, _)| (lm, lm))
                .collect();
            LoopCandidate {
                current_kf,
                candidate_kf: id,
                matches,
                verified: false,
                relative_pose: None,
            }
        })
        .collect()
}

/// Geometric verification of a candidate.
///
/// The paired observations are unprojected to bearings and fed to the same
/// RANSAC essential-matrix machinery the initializer uses, except that the
/// acceptance ratio comes from the loop configuration: the candidate is
/// verified iff the final inlier ratio reaches `loop.min_inlier_ratio`. The
/// decomposed pose fixes translation only up to scale; scale is resolved by
/// comparing each inlier's triangulated depth against the candidate-side
/// map depth and taking the median ratio.
///
/// A revisit with no usable baseline (the camera returned to the same spot
/// and only turned) leaves the epipolar system degenerate, so when no
/// essential model survives, a rotation-only alignment of the bearings is
/// tried instead, gated by the same angular threshold and inlier ratio, and
/// yields a zero-translation relative pose.
///
/// Failing the gate leaves the candidate unverified and returns `Ok(false)`
/// — that is an expected outcome, not an error. Fewer than
/// [`MIN_LOOP_MATCHES`] usable pairs is an error: such a candidate should
/// have been filtered out before verification.
pub fn verify_candidate(
    map: &MapState,
    cand: &mut LoopCandidate,
    camera: &CameraModel,
    cfg: &RunConfig,
) -> Result<bool, LoopError> {
    cand.verified = false;
    cand.relative_pose = None;

    // bearing_a = candidate side, bearing_b = current side, so the
    // decomposed model is T_b←a = T_current←candidate directly.
    let mut corrs: Vec<Correspondence> = Vec::new();
    let mut cand_points: Vec<Vector3<f64>> = Vec::new();
    let mut sigmas: Vec<f64> = Vec::new();
    for &(cur_lm, cand_lm) in &cand.matches {
        let (Some(obs_cur), Some(obs_cand)) = (
            map.observation(cand.current_kf, cur_lm),
            map.observation(cand.candidate_kf, cand_lm),
        ) else {
            continue;
        };
        let Some(lm) = map.landmark(cand_lm) else {
            continue;
        };
        let (Ok(b_cur), Ok(b_cand)) =
            (camera.unproject(&obs_cur.pixel), camera.unproject(&obs_cand.pixel))
        else {
            continue;
        };
        corrs.push(Correspondence { bearing_a: b_cand, bearing_b: b_cur });
        cand_points.push(lm.position);
        sigmas.push(0.5 * (obs_cur.sigma_px + obs_cand.sigma_px));
    }
    if corrs.len() < MIN_LOOP_MATCHES {
        return Err(LoopError::TooFewMatches { got: corrs.len(), need: MIN_LOOP_MATCHES });
    }

    // As in initialization, the configured angular gate is a floor that
    // the observations' recorded pixel noise can widen.
    sigmas.sort_by(f64::total_cmp);
    let gate = cfg
        .init
        .ransac_thresh_rad
        .max(noise_gate_rad(camera, sigmas[sigmas.len() / 2]));
    let ransac_cfg = InitConfig {
        min_inlier_ratio: cfg.loop_closing.min_inlier_ratio,
        ransac_thresh_rad: gate,
        ..cfg.init.clone()
    };
    let t_cand = map.keyframe(cand.candidate_kf).unwrap().pose;

    let rel = essential_relative_pose(&t_cand, &corrs, &cand_points, &ransac_cfg, cfg.seed)
        .or_else(|| rotation_only_relative_pose(&corrs, &ransac_cfg));
    if let Some(rel) = rel {
        cand.verified = true;
        cand.relative_pose = Some(rel);
    }
    Ok(cand.verified)
}

/// Essential-matrix verification path: RANSAC, cheirality-voted
/// decomposition, then scale from the median ratio of candidate-side map
/// depth to triangulated depth over the inliers. `None` means no model
/// passed the gate, not a caller error.
fn essential_relative_pose(
    t_cand: &Pose,
    corrs: &[Correspondence],
    cand_points: &[Vector3<f64>],
    cfg: &InitConfig,
    seed: u64,
) -> Option<Pose> {
    let ransac = ransac_essential(corrs, cfg, seed).ok()?;
    let inliers: Vec<Correspondence> = corrs
        .iter()
        .zip(&ransac.inliers)
        .filter(|(_, keep)| **keep)
        .map(|(c, _)| *c)
        .collect();
    let mut rel = decompose_essential(&ransac.essential, &inliers).ok()?;

    let mut ratios: Vec<f64> = Vec::new();
    for ((c, p), keep) in corrs.iter().zip(cand_points).zip(&ransac.inliers) {
        if !*keep {
            continue;
        }
        // Triangulate in the candidate frame under the unit-baseline model;
        // the returned parameter along the candidate ray is the depth the
        // model assigns to this pairing.
        let Ok((_, model_depth, _)) =
            triangulate_midpoint(&Pose::identity(), &rel, &c.bearing_a, &c.bearing_b)
        else {
            continue;
        };
        let map_depth = t_cand.act(p).norm();
        if model_depth > 1e-9 && map_depth > 1e-9 {
            ratios.push(map_depth / model_depth);
        }
    }
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(|a, b| a.total_cmp(b));
    rel.translation *= ratios[ratios.len() / 2];
    Some(rel)
}

/// Rotation-only fit for baseline-free revisits: the orthogonal Procrustes
/// alignment of the candidate bearings onto the current bearings, accepted
/// under the same angular threshold and inlier ratio as the epipolar path.
fn rotation_only_relative_pose(corrs: &[Correspondence], cfg: &InitConfig) -> Option<Pose> {
    let mut h = Matrix3::zeros();
    for c in corrs {
        h += c.bearing_b.into_inner() * c.bearing_a.into_inner().transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u0, v_t0, s) = (svd.u?, svd.v_t?, svd.singular_values);
    // Singular values come back unsorted and the determinant correction must
    // land on the smallest one, so order the columns explicitly.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = Matrix3::from_columns(&[u0.column(order[0]), u0.column(order[1]), u0.column(order[2])]);
    let v0 = v_t0.transpose();
    let v = Matrix3::from_columns(&[v0.column(order[0]), v0.column(order[1]), v0.column(order[2])]);
    let sign = (u.determinant() * v.determinant()).signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));

    let agree = corrs
        .iter()
        .filter(|c| angle_between(&(rot * c.bearing_a), &c.bearing_b) < cfg.ransac_thresh_rad)
        .count();
    let ratio = agree as f64 / corrs.len() as f64;
    if ratio < cfg.min_inlier_ratio {
        return None;
    }
    Some(Pose::from_parts(rot, Vector3::zeros()))
}

/// Folds a verified closure into the map. Steps run in a fixed order:
///
/// 1. **Rigid correction.** The verified relative pose implies where the
///    current keyframe should be: `T_new = rel ∘ T_candidate`. The world
///    correction `d = T_new⁻¹ ∘ T_old` maps drifted geometry onto corrected
///    geometry, so every keyframe after the candidate becomes `T ∘ d⁻¹` and
///    every landmark first observed by one of them moves to `d(p)` — which
///    preserves all reprojections inside the drifted segment while snapping
///    the segment as a whole onto the loop.
/// 2. **Duplicate fusion.** Each match pairing two distinct landmark ids is
///    merged into the candidate-side landmark: the duplicate's observations
///    move onto the survivor (an observer that already sees the survivor
///    keeps its existing measurement) and the duplicate is removed. The
///    survivor's residual history thereby becomes the concatenation of
///    both, capped by the history window at the refresh below.
/// 3. **Global bundle adjustment** distributes the remaining loop error;
///    its accepted steps only ever lower the total cost.
/// 4. **Uncertainty refresh** rebuilds every covariance from the corrected
///    map.
///
/// The candidate must have passed [`verify_candidate`] and both its
/// keyframes must still be in the map.
pub fn close_loop(
    map: &mut MapState,
    cand: &LoopCandidate,
    camera: &CameraModel,
    cfg: &RunConfig,
) -> Result<SolveReport, LoopError> {
    if !cand.verified {
        return Err(LoopError::NotVerified);
    }
    let Some(rel) = cand.relative_pose else {
        return Err(LoopError::NotVerified);
    };
    let t_cand = map
        .keyframe(cand.candidate_kf)
        .expect("loop candidate keyframe is in the map")
        .pose;
    let t_cur_old = map
        .keyframe(cand.current_kf)
        .expect("loop current keyframe is in the map")
        .pose;

    let t_cur_new = rel.compose(&t_cand);
    let d = t_cur_new.inverse().compose(&t_cur_old);
    let d_inv = d.inverse();

    let tail: Vec<KeyframeId> = map.keyframe_ids().filter(|&id| id > cand.candidate_kf).collect();
    for &id in &tail {
        let kf = map.keyframe_mut(id).unwrap();
        kf.pose = kf.pose.compose(&d_inv);
    }
    // A landmark belongs to the drifted segment if its earliest observer
    // does (observers iterate in keyframe-id order).
    let tail_owned: Vec<LandmarkId> = map
        .landmark_ids()
        .filter(|&lm| {
            map.observers_of_landmark(lm)
                .next()
                .is_some_and(|(kf, _)| kf > cand.candidate_kf)
        })
        .collect();
    for lm in tail_owned {
        let l = map.landmark_mut(lm).unwrap();
        l.position = d.act(&l.position);
    }

    for &(cur_lm, cand_lm) in &cand.matches {
        if cur_lm == cand_lm || map.landmark(cur_lm).is_none() || map.landmark(cand_lm).is_none()
        {
            continue;
        }
        let moved: Vec<(KeyframeId, Observation)> =
            map.observers_of_landmark(cur_lm).map(|(kf, obs)| (kf, *obs)).collect();
        map.remove_landmark(cur_lm);
        for (kf, obs) in moved {
            if map.observation(kf, cand_lm).is_none() {
                map.insert_observation(kf, cand_lm, obs);
            }
        }
    }

    let report = solve_global_ba(
        map,
        camera,
        &cfg.ba,
        &cfg.unc,
        cfg.run.use_point_unc,
        cfg.run.use_pose_unc,
    )?;
    refresh_all_uncertainties(map, camera, &cfg.unc);
    Ok(report)
}
