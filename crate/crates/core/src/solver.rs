//! Robust Levenberg–Marquardt bundle adjustment with per-factor uncertainty
//! weighting and Schur-complement landmark elimination.
//!
//! Every optimization in the backend — pose-only tracking, the sliding
//! local window, and full-map adjustment — runs through one engine. A
//! problem is a list of [`ReprojectionFactor`]s over a set of free poses
//! and free landmarks; everything not free is a constant taken from the
//! map. The factor's *role* decides how its 2×2 measurement covariance is
//! built, following a single rule: **whatever a factor holds fixed but
//! does not trust gets its covariance propagated into the measurement**.
//!
//! * both endpoints free → [`FactorRole::Standard`] (the optimizer is
//!   estimating them; inflating the noise would double-count),
//! * pose free, landmark fixed → [`FactorRole::PointUncWeighted`],
//! * pose fixed, landmark free → [`FactorRole::PoseUncWeighted`],
//! * both fixed → the factor carries no information and is dropped.
//!
//! With every stored covariance zeroed the weighted roles degenerate to
//! `Standard` *bit for bit* — the propagated term is an exact zero matrix
//! and both paths invert the same measurement covariance through the same
//! routine — so the classical optimizer is recovered exactly, not merely
//! approximately.

use crate::camera::{CameraModel, Pixel};
use crate::config::{BaConfig, UncConfig};
use crate::map::{KeyframeId, LandmarkId, MapState};
use crate::se3::{jacobian_pose_perturbation, Pose, Twist};
use crate::uncertainty::{
    project_point_uncertainty, project_pose_uncertainty, MeasurementNoise, SpdOps,
};
use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6,
};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("need at least {need} usable matches, got {got}")]
    TooFewMatches { got: usize, need: usize },
    #[error("optimization diverged: non-finite cost or unsolvable normal equations")]
    Diverged,
    #[error("nothing anchors the solution: the gauge is unconstrained")]
    GaugeUnderconstrained,
}

/// How a factor's measurement covariance is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorRole {
    /// Measurement noise only.
    Standard,
    /// Measurement noise plus the fixed landmark's projected covariance.
    PointUncWeighted,
    /// Measurement noise plus the fixed keyframe's projected pose covariance.
    PoseUncWeighted,
}

/// One pixel measurement tying a keyframe to a landmark.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionFactor {
    pub kf: KeyframeId,
    pub lm: LandmarkId,
    pub pixel: Pixel,
    /// Effective isotropic pixel noise σ (already defaulted, > 0).
    pub sigma_px: f64,
    pub role: FactorRole,
}

/// Outcome bookkeeping common to all solves.
#[derive(Debug, Clone)]
pub struct SolveReport {
    /// Outer LM iterations consumed (accepted and rejected).
    pub iterations: usize,
    pub chi2_initial: f64,
    pub chi2_final: f64,
    /// Factors whose final whitened squared error passes the gate.
    pub n_inliers: usize,
    /// Everything else, including factors that became unprojectable.
    pub n_outliers: usize,
    /// Relative cost decrease fell below threshold before the iteration cap.
    pub converged: bool,
    /// Robust-weighted Gauss-Newton diagonal blocks of the free poses at
    /// the final state, inlier factors only.
    pub hessian_blocks: BTreeMap<KeyframeId, Matrix6<f64>>,
}

/// Result of pose-only tracking.
#[derive(Debug, Clone)]
pub struct TrackingResult {
    pub pose: Pose,
    /// Gauss-Newton information of the tracked pose; seeds the keyframe's
    /// covariance if this frame is promoted.
    pub hessian: Matrix6<f64>,
    pub report: SolveReport,
}

/// A 2D-3D correspondence fed to tracking.
#[derive(Debug, Clone, Copy)]
pub struct TrackMatch {
    pub lm: LandmarkId,
    pub pixel: Pixel,
    /// Per-measurement σ; 0 means "use the configured default".
    pub sigma_px: f64,
}

/// IRLS weight of the Huber loss as a function of the whitened squared
/// error `s = rᵀΣ⁻¹r`: 1 inside the basin, `δ/√s` beyond it, with
/// `δ² = huber_chi2`.
pub fn robust_weight(s: f64, huber_chi2: f64) -> f64 {
    if s <= huber_chi2 {
        1.0
    } else {
        (huber_chi2 / s).sqrt()
    }
}

/// Huber-robustified cost for a whitened squared error: `s` inside the
/// basin, `2δ√s − δ²` beyond it (continuous with matching slope at `δ²`).
pub fn robust_cost(s: f64, huber_chi2: f64) -> f64 {
    if s <= huber_chi2 {
        s
    } else {
        2.0 * (huber_chi2 * s).sqrt() - huber_chi2
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Escalating λ beyond this means the normal equations stopped improving
/// anything; treat the solve as stuck.
const LAMBDA_CEILING: f64 = 1e15;
/// Relative cost decrease below which an accepted step counts as converged.
const REL_DECREASE: f64 = 1e-8;

/// Whitened-pixel cost that is numerically zero. Below this scale the
/// relative-decrease test switches to an absolute one (progress smaller than
/// `REL_DECREASE * CHI2_FLOOR` is noise), so exactly-consistent problems
/// whose cost collapses to machine precision still register convergence
/// instead of chasing 100% relative decreases forever.
const CHI2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

struct Engine<'a> {
    camera: &'a CameraModel,
    cfg: &'a BaConfig,
    factors: Vec<ReprojectionFactor>,
    /// Free pose slot per keyframe id.
    free_poses: BTreeMap<KeyframeId, usize>,
    /// Pose and covariance of the fixed keyframes.
    fixed_poses: BTreeMap<KeyframeId, (Pose, Matrix6<f64>)>,
    /// Free landmark slot per landmark id.
    free_points: BTreeMap<LandmarkId, usize>,
    /// Position and covariance of the fixed landmarks.
    fixed_points: BTreeMap<LandmarkId, (Vector3<f64>, Matrix3<f64>)>,
}

/// One linearization: cost, frozen per-factor whitening matrices and the
/// block-sparse normal equations.
struct Lin {
    chi2: f64,
    /// `None` marks a factor that was unprojectable at this state.
    whitenings: Vec<Option<Matrix2<f64>>>,
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    /// Per free landmark: (pose slot, coupling block) pairs.
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
}

struct RunOutcome {
    state: State,
    iterations: usize,
    chi2_initial: f64,
    chi2_final: f64,
    converged: bool,
    inlier_mask: Vec<bool>,
    pose_blocks: Vec<Matrix6<f64>>,
}

impl Engine<'_> {
    fn pose_of(&self, kf: KeyframeId, state: &State) -> Pose {
        match self.free_poses.get(&kf) {
            Some(&i) => state.poses[i],
            None => self.fixed_poses[&kf].0,
        }
    }

    fn point_of(&self, lm: LandmarkId, state: &State) -> Vector3<f64> {
        match self.free_points.get(&lm) {
            Some(&i) => state.points[i],
            None => self.fixed_points[&lm].0,
        }
    }

    /// Residual (predicted − measured) and whitening covariance of one
    /// factor at a state; `None` when the landmark is unprojectable there.
    ///
    /// Both the projection and its Jacobian must succeed before the role
    /// is consulted, so a factor's validity never depends on which
    /// weighting mode is active.
    fn whiten(
        &self,
        f: &ReprojectionFactor,
        state: &State,
    ) -> Option<(Vector2<f64>, Matrix2<f64>, Pose, Vector3<f64>)> {
        let pose = self.pose_of(f.kf, state);
        let point = self.point_of(f.lm, state);
        let q = pose.act(&point);
        let pred = self.camera.project(&q).ok()?;
        self.camera.jacobian_project(&q).ok()?;
        let meas = MeasurementNoise::isotropic(f.sigma_px);
        let sigma = match f.role {
            FactorRole::Standard => meas.0,
            FactorRole::PointUncWeighted => {
                let s3 = self
                    .fixed_points
                    .get(&f.lm)
                    .map(|(_, s)| *s)
                    .unwrap_or_else(Matrix3::zeros);
                project_point_uncertainty(&pose, self.camera, &point, &s3, &meas).ok()?
            }
            FactorRole::PoseUncWeighted => {
                let s6 = self
                    .fixed_poses
                    .get(&f.kf)
                    .map(|(_, s)| *s)
                    .unwrap_or_else(Matrix6::zeros);
                project_pose_uncertainty(&pose, self.camera, &point, &s6, &meas).ok()?
            }
        };
        let r = Vector2::new(pred.u - f.pixel.u, pred.v - f.pixel.v);
        Some((r, sigma.invert_spd(), pose, point))
    }

    fn linearize(&self, state: &State) -> Lin {
        let np = self.free_poses.len();
        let nl = self.free_points.len();
        let mut lin = Lin {
            chi2: 0.0,
            whitenings: Vec::with_capacity(self.factors.len()),
            hpp: DMatrix::zeros(6 * np, 6 * np),
            gp: DVector::zeros(6 * np),
            hll: vec![Matrix3::zeros(); nl],
            gl: vec![Vector3::zeros(); nl],
            hpl: vec![Vec::new(); nl],
        };
        for f in &self.factors {
            let Some((r, w, pose, point)) = self.whiten(f, state) else {
                lin.whitenings.push(None);
                lin.chi2 += self.cfg.huber_chi2;
                continue;
            };
            let s = (r.transpose() * w * r)[(0, 0)];
            let rw = robust_weight(s, self.cfg.huber_chi2);
            lin.chi2 += robust_cost(s, self.cfg.huber_chi2);
            let info = w * rw;

            let q = pose.act(&point);
            // Safe: whiten() already proved the Jacobian exists here.
            let j_pi = self.camera.jacobian_project(&q).unwrap();
            let pose_slot = self.free_poses.get(&f.kf).copied();
            let point_slot = self.free_points.get(&f.lm).copied();

            let jp = pose_slot.map(|_| j_pi * jacobian_pose_perturbation(&pose, &point));
            let jl = point_slot.map(|_| j_pi * pose.rotation_matrix());

            if let (Some(pi), Some(jp)) = (pose_slot, jp.as_ref()) {
                let jtw = jp.transpose() * info; // 6×2
                let mut h = lin.hpp.fixed_view_mut::<6, 6>(6 * pi, 6 * pi);
                h += jtw * jp;
                let mut g = lin.gp.fixed_rows_mut::<6>(6 * pi);
                g += jtw * r;
            }
            if let (Some(li), Some(jl)) = (point_slot, jl.as_ref()) {
                let jtw = jl.transpose() * info; // 3×2
                lin.hll[li] += jtw * jl;
                lin.gl[li] += jtw * r;
            }
            if let (Some(pi), Some(li), Some(jp), Some(jl)) =
                (pose_slot, point_slot, jp.as_ref(), jl.as_ref())
            {
                lin.hpl[li].push((pi, jp.transpose() * info * jl));
            }
            lin.whitenings.push(Some(w));
        }
        lin
    }

    /// Robust cost of a state under the whitenings frozen at the current
    /// linearization, so accept/reject decisions compare like with like.
    fn cost(&self, state: &State, whitenings: &[Option<Matrix2<f64>>]) -> f64 {
        let mut chi2 = 0.0;
        for (f, w) in self.factors.iter().zip(whitenings) {
            let Some(w) = w else {
                chi2 += self.cfg.huber_chi2;
                continue;
            };
            let pose = self.pose_of(f.kf, state);
            let point = self.point_of(f.lm, state);
            match self.camera.project(&pose.act(&point)) {
                Ok(pred) => {
                    let r = Vector2::new(pred.u - f.pixel.u, pred.v - f.pixel.v);
                    let s = (r.transpose() * w * r)[(0, 0)];
                    chi2 += robust_cost(s, self.cfg.huber_chi2);
                }
                Err(_) => chi2 += self.cfg.huber_chi2,
            }
        }
        chi2
    }

    /// Builds and solves the damped, landmark-eliminated normal equations.
    /// `None` means the system was not solvable at this λ.
    fn solve_step(&self, lin: &Lin, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let np = self.free_poses.len();
        let nl = self.free_points.len();

        // Damped landmark blocks and their inverses.
        let mut hll_inv = Vec::with_capacity(nl);
        for h in &lin.hll {
            let mut d = *h;
            for i in 0..3 {
                d[(i, i)] += lambda * h[(i, i)];
            }
            hll_inv.push(d.invert_spd());
        }

        let mut delta_p = DVector::zeros(6 * np);
        if np > 0 {
            let mut s = lin.hpp.clone();
            for i in 0..6 * np {
                s[(i, i)] += lambda * lin.hpp[(i, i)];
            }
            let mut rhs = -lin.gp.clone();
            for li in 0..nl {
                let inv = &hll_inv[li];
                // Cache B_a · Hll⁻¹ per observing pose.
                let scaled: Vec<(usize, Matrix6x3<f64>)> = lin.hpl[li]
                    .iter()
                    .map(|(a, b)| (*a, b * inv))
                    .collect();
                for (a, ba_inv) in &scaled {
                    for (b, bb) in &lin.hpl[li] {
                        let mut block = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                        block -= ba_inv * bb.transpose();
                    }
                    let mut seg = rhs.fixed_rows_mut::<6>(6 * a);
                    seg += ba_inv * lin.gl[li];
                }
            }
            let chol = s.cholesky()?;
            delta_p = chol.solve(&rhs);
            if !delta_p.iter().all(|x| x.is_finite()) {
                return None;
            }
        }

        let mut delta_l = Vec::with_capacity(nl);
        for li in 0..nl {
            let mut acc = -lin.gl[li];
            for (a, b) in &lin.hpl[li] {
                let dp = Vector6::from_fn(|r, _| delta_p[6 * a + r]);
                acc -= b.transpose() * dp;
            }
            let dl = hll_inv[li] * acc;
            if !dl.iter().all(|x| x.is_finite()) {
                return None;
            }
            delta_l.push(dl);
        }
        Some((delta_p, delta_l))
    }

    fn apply(&self, state: &State, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> State {
        let mut next = state.clone();
        for (i, pose) in next.poses.iter_mut().enumerate() {
            let xi = Vector6::from_fn(|r, _| dp[6 * i + r]);
            *pose = pose.perturbed(&Twist(xi));
        }
        for (i, p) in next.points.iter_mut().enumerate() {
            *p += dl[i];
        }
        next
    }

    fn run(&self, initial: State) -> Result<RunOutcome, SolveError> {
        let mut state = initial;
        let mut lin = self.linearize(&state);
        if !lin.chi2.is_finite() {
            return Err(SolveError::Diverged);
        }
        let chi2_initial = lin.chi2;
        let mut lambda = self.cfg.lambda0;
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..self.cfg.max_iters {
            iterations += 1;
            let Some((dp, dl)) = self.solve_step(&lin, lambda) else {
                lambda *= 2.0;
                if lambda > LAMBDA_CEILING {
                    return Err(SolveError::Diverged);
                }
                continue;
            };
            let candidate = self.apply(&state, &dp, &dl);
            let c = self.cost(&candidate, &lin.whitenings);
            if !c.is_finite() {
                return Err(SolveError::Diverged);
            }
            if c <= lin.chi2 {
                let rel = (lin.chi2 - c) / lin.chi2.max(CHI2_FLOOR);
                state = candidate;
                lin = self.linearize(&state);
                lambda = (lambda / 3.0).max(1e-12);
                if rel < REL_DECREASE {
                    converged = true;
                    break;
                }
            } else if lin.chi2 <= CHI2_FLOOR {
                // The cost is already numerically zero and the proposal went
                // (negligibly) uphill: nothing left to gain. At larger costs
                // a slightly-uphill proposal is not evidence of optimality —
                // it only means the damping is too small — so this shortcut
                // must not fire mid-descent.
                converged = true;
                break;
            } else {
                lambda *= 2.0;
                if lambda > LAMBDA_CEILING {
                    break;
                }
            }
        }

        if !lin.chi2.is_finite() {
            return Err(SolveError::Diverged);
        }

        // Final classification and pose information blocks, using the
        // whitenings of the last linearization so the gate is consistent
        // with how the factors were weighted.
        let mut inlier_mask = vec![false; self.factors.len()];
        let mut pose_blocks = vec![Matrix6::zeros(); self.free_poses.len()];
        for (idx, (f, w)) in self.factors.iter().zip(&lin.whitenings).enumerate() {
            let Some(w) = w else { continue };
            let Some((r, pose, point)) = self.residual_at(f, &state) else {
                continue;
            };
            let s = (r.transpose() * w * r)[(0, 0)];
            if s > self.cfg.huber_chi2 {
                continue;
            }
            inlier_mask[idx] = true;
            if let Some(&pi) = self.free_poses.get(&f.kf) {
                let q = pose.act(&point);
                if let Ok(j_pi) = self.camera.jacobian_project(&q) {
                    let jp = j_pi * jacobian_pose_perturbation(&pose, &point);
                    let rw = robust_weight(s, self.cfg.huber_chi2);
                    pose_blocks[pi] += jp.transpose() * (w * rw) * jp;
                }
            }
        }

        Ok(RunOutcome {
            state,
            iterations,
            chi2_initial,
            chi2_final: lin.chi2,
            converged,
            inlier_mask,
            pose_blocks,
        })
    }

    /// Bare residual of a factor at a state (used by the final
    /// classification pass, which reuses the frozen whitenings).
    fn residual_at(
        &self,
        f: &ReprojectionFactor,
        state: &State,
    ) -> Option<(Vector2<f64>, Pose, Vector3<f64>)> {
        let pose = self.pose_of(f.kf, state);
        let point = self.point_of(f.lm, state);
        let pred = self.camera.project(&pose.act(&point)).ok()?;
        let r = Vector2::new(pred.u - f.pixel.u, pred.v - f.pixel.v);
        Some((r, pose, point))
    }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Pose-only optimization of one camera against fixed map landmarks.
///
/// Runs two rounds: a full robust solve, then a re-solve restricted to the
/// factors that pass the χ² gate, so gross mismatches cannot bias the
/// final pose even through the Huber tail. With `use_point_unc` the
/// factors are weighted by each landmark's projected covariance.
pub fn solve_tracking(
    camera: &CameraModel,
    map: &MapState,
    initial: &Pose,
    matches: &[TrackMatch],
    cfg: &BaConfig,
    default_sigma_px: f64,
    use_point_unc: bool,
) -> Result<TrackingResult, SolveError> {
    const NEED: usize = 3;
    let role = if use_point_unc {
        FactorRole::PointUncWeighted
    } else {
        FactorRole::Standard
    };

    let mut factors = Vec::new();
    let mut fixed_points = BTreeMap::new();
    for m in matches {
        let Some(lm) = map.landmark(m.lm) else { continue };
        fixed_points.insert(m.lm, (lm.position, lm.uncertainty.sigma));
        factors.push(ReprojectionFactor {
            kf: 0,
            lm: m.lm,
            pixel: m.pixel,
            sigma_px: if m.sigma_px > 0.0 { m.sigma_px } else { default_sigma_px },
            role,
        });
    }
    if factors.len() < NEED {
        return Err(SolveError::TooFewMatches { got: factors.len(), need: NEED });
    }
    let total = factors.len();

    let make_engine = |factors: Vec<ReprojectionFactor>| Engine {
        camera,
        cfg,
        factors,
        free_poses: BTreeMap::from([(0, 0)]),
        fixed_poses: BTreeMap::new(),
        free_points: BTreeMap::new(),
        fixed_points: fixed_points.clone(),
    };

    let engine = make_engine(factors.clone());
    let first = engine.run(State { poses: vec![*initial], points: Vec::new() })?;

    let survivors: Vec<ReprojectionFactor> = factors
        .iter()
        .zip(&first.inlier_mask)
        .filter(|(_, keep)| **keep)
        .map(|(f, _)| *f)
        .collect();
    if survivors.len() < NEED {
        return Err(SolveError::TooFewMatches { got: survivors.len(), need: NEED });
    }

    let engine = make_engine(survivors);
    let second = engine.run(State { poses: first.state.poses.clone(), points: Vec::new() })?;
    let n_inliers = second.inlier_mask.iter().filter(|b| **b).count();

    Ok(TrackingResult {
        pose: second.state.poses[0],
        hessian: second.pose_blocks[0],
        report: SolveReport {
            iterations: first.iterations + second.iterations,
            chi2_initial: first.chi2_initial,
            chi2_final: second.chi2_final,
            n_inliers,
            n_outliers: total - n_inliers,
            converged: second.converged,
            hessian_blocks: BTreeMap::new(),
        },
    })
}

/// Bundle adjustment over an explicit split of free and fixed keyframes.
///
/// Landmarks observed by at least one free keyframe enter the problem
/// (with no free keyframe at all, the call is a structure-only refinement
/// and the fixed keyframes' landmarks enter instead); those with two or
/// more usable factors are optimized, the rest stay fixed (and weight
/// their factors with their own covariance when `use_point_unc` is on). Factors of fixed keyframes are weighted by the
/// keyframe's pose covariance when `use_pose_unc` is on. If no fixed
/// keyframe is given, the oldest free keyframe is hard-fixed to pin the
/// gauge. On success poses, landmark positions, and the free keyframes'
/// Hessian blocks are written back into the map.
pub fn solve_local_ba(
    map: &mut MapState,
    camera: &CameraModel,
    free_kfs: &[KeyframeId],
    fixed_kfs: &[KeyframeId],
    cfg: &BaConfig,
    unc: &UncConfig,
    use_point_unc: bool,
    use_pose_unc: bool,
) -> Result<SolveReport, SolveError> {
    let mut free: BTreeSet<KeyframeId> =
        free_kfs.iter().copied().filter(|id| map.keyframe(*id).is_some()).collect();
    let mut fixed: BTreeSet<KeyframeId> = fixed_kfs
        .iter()
        .copied()
        .filter(|id| map.keyframe(*id).is_some() && !free.contains(id))
        .collect();
    if free.is_empty() && fixed.is_empty() {
        return Err(SolveError::GaugeUnderconstrained);
    }
    if fixed.is_empty() {
        let oldest = *free.iter().next().unwrap();
        free.remove(&oldest);
        fixed.insert(oldest);
    }

    // Landmarks touched by the free keyframes. With every keyframe fixed
    // the call degenerates to structure-only refinement, so the fixed set
    // seeds the candidates instead.
    let mut candidates: BTreeSet<LandmarkId> = BTreeSet::new();
    let candidate_sources = if free.is_empty() { &fixed } else { &free };
    for &kf in candidate_sources {
        candidates.extend(map.observations_of_keyframe(kf).map(|(lm, _)| lm));
    }

    // Enumerate factors (keyframes in id order, landmarks in id order
    // within each keyframe) and count per-landmark support.
    let mut raw: Vec<(KeyframeId, LandmarkId, Pixel, f64)> = Vec::new();
    let mut support: BTreeMap<LandmarkId, usize> = BTreeMap::new();
    for &kf in free.iter().chain(fixed.iter()) {
        for (lm, obs) in map.observations_of_keyframe(kf) {
            if !candidates.contains(&lm) {
                continue;
            }
            let sigma = if obs.sigma_px > 0.0 { obs.sigma_px } else { unc.pixel_sigma };
            raw.push((kf, lm, obs.pixel, sigma));
            *support.entry(lm).or_insert(0) += 1;
        }
    }

    let free_lms: BTreeSet<LandmarkId> = support
        .iter()
        .filter(|(_, n)| **n >= 2)
        .map(|(lm, _)| *lm)
        .collect();

    let mut factors = Vec::with_capacity(raw.len());
    for (kf, lm, pixel, sigma_px) in raw {
        let pose_free = free.contains(&kf);
        let point_free = free_lms.contains(&lm);
        let role = match (pose_free, point_free) {
            (true, true) => FactorRole::Standard,
            (true, false) if use_point_unc => FactorRole::PointUncWeighted,
            (true, false) => FactorRole::Standard,
            (false, true) if use_pose_unc => FactorRole::PoseUncWeighted,
            (false, true) => FactorRole::Standard,
            (false, false) => continue, // both constant: no information
        };
        factors.push(ReprojectionFactor { kf, lm, pixel, sigma_px, role });
    }
    if factors.is_empty() {
        return Err(SolveError::TooFewMatches { got: 0, need: 1 });
    }

    let free_poses: BTreeMap<KeyframeId, usize> =
        free.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let fixed_poses: BTreeMap<KeyframeId, (Pose, Matrix6<f64>)> = fixed
        .iter()
        .map(|id| {
            let kf = map.keyframe(*id).unwrap();
            (*id, (kf.pose, kf.uncertainty.sigma))
        })
        .collect();
    let free_points: BTreeMap<LandmarkId, usize> =
        free_lms.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let fixed_points: BTreeMap<LandmarkId, (Vector3<f64>, Matrix3<f64>)> = candidates
        .iter()
        .filter(|lm| !free_lms.contains(lm))
        .map(|id| {
            let lm = map.landmark(*id).unwrap();
            (*id, (lm.position, lm.uncertainty.sigma))
        })
        .collect();

    let state = State {
        poses: free_poses.keys().map(|id| map.keyframe(*id).unwrap().pose).collect(),
        points: free_points.keys().map(|id| map.landmark(*id).unwrap().position).collect(),
    };

    let engine = Engine {
        camera,
        cfg,
        factors,
        free_poses,
        fixed_poses,
        free_points,
        fixed_points,
    };
    let outcome = engine.run(state)?;

    let mut hessian_blocks = BTreeMap::new();
    for (kf_id, &slot) in &engine.free_poses {
        let kf = map.keyframe_mut(*kf_id).unwrap();
        kf.pose = outcome.state.poses[slot];
        kf.hessian = Some(outcome.pose_blocks[slot]);
        hessian_blocks.insert(*kf_id, outcome.pose_blocks[slot]);
    }
    for (lm_id, &slot) in &engine.free_points {
        map.landmark_mut(*lm_id).unwrap().position = outcome.state.points[slot];
    }

    let n_inliers = outcome.inlier_mask.iter().filter(|b| **b).count();
    Ok(SolveReport {
        iterations: outcome.iterations,
        chi2_initial: outcome.chi2_initial,
        chi2_final: outcome.chi2_final,
        n_inliers,
        n_outliers: engine.factors.len() - n_inliers,
        converged: outcome.converged,
        hessian_blocks,
    })
}

/// Full-map adjustment: every keyframe is free except the oldest, which
/// pins the gauge.
pub fn solve_global_ba(
    map: &mut MapState,
    camera: &CameraModel,
    cfg: &BaConfig,
    unc: &UncConfig,
    use_point_unc: bool,
    use_pose_unc: bool,
) -> Result<SolveReport, SolveError> {
    let ids: Vec<KeyframeId> = map.keyframe_ids().collect();
    let Some((&anchor, rest)) = ids.split_first() else {
        return Err(SolveError::GaugeUnderconstrained);
    };
    solve_local_ba(map, camera, rest, &[anchor], cfg, unc, use_point_unc, use_pose_unc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Keyframe, Landmark, Observation};
    use crate::uncertainty::PointUncertainty;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::TAU;

    fn camera() -> CameraModel {
        CameraModel::fisheye_default()
    }

    /// World-to-camera pose of a camera at `center` with its optical axis
    /// pointing at `target`.
    fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
        let dir = (target - center).normalize();
        let rot = UnitQuaternion::face_towards(&dir, &Vector3::z()).inverse();
        Pose::from_parts(rot, -(rot * center))
    }

    /// Cameras on a ring of radius 2 looking outward at landmarks on a
    /// shell between radius 4.5 and 7 around the origin.
    fn ring_scene(
        n_kf: usize,
        n_lm: usize,
        seed: u64,
        cam: &CameraModel,
    ) -> (Vec<Pose>, Vec<Vector3<f64>>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..n_kf)
            .map(|i| {
                let a = i as f64 / n_kf as f64 * TAU;
                let c = Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.2 * (3.0 * a).sin());
                let out = Vector3::new(a.cos(), a.sin(), 0.1);
                look_at(c, c + out)
            })
            .collect();
        // Outward-looking cameras cover ~150° of shell azimuth each, so
        // demanding too many covisible views on a sparse ring never
        // terminates; two suffice for bundle adjustment.
        let need = if n_kf >= 6 { 3 } else { 2 };
        let mut lms = Vec::new();
        while lms.len() < n_lm {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.4..0.6),
            );
            if dir.norm() < 1e-3 {
                continue;
            }
            let p = dir.normalize() * rng.random_range(4.5..7.0);
            let seen = poses.iter().filter(|t| cam.project(&t.act(&p)).is_ok()).count();
            if seen >= need {
                lms.push(p);
            }
        }
        (poses, lms)
    }

    fn random_twist(rng: &mut ChaCha12Rng, rot: f64, trans: f64) -> Twist {
        let g = |r: &mut ChaCha12Rng, s: f64| -> f64 {
            let z: f64 = r.sample(StandardNormal);
            z * s
        };
        Twist(Vector6::new(
            g(rng, rot),
            g(rng, rot),
            g(rng, rot),
            g(rng, trans),
            g(rng, trans),
            g(rng, trans),
        ))
    }

    fn pose_error(a: &Pose, b: &Pose) -> f64 {
        let dr = a.rotation.angle_to(&b.rotation);
        let dt = (a.center() - b.center()).norm();
        dr + dt
    }

    /// Exact-pixel map over a ring scene; returns the true poses/points too.
    fn build_map(
        n_kf: usize,
        n_lm: usize,
        seed: u64,
        cam: &CameraModel,
    ) -> (MapState, Vec<Pose>, Vec<Vector3<f64>>) {
        let (poses, lms) = ring_scene(n_kf, n_lm, seed, cam);
        let mut map = MapState::new();
        for (i, pose) in poses.iter().enumerate() {
            map.insert_keyframe(Keyframe::new(i as u64, i as u64, i as f64 * 0.1, *pose));
        }
        for (j, p) in lms.iter().enumerate() {
            map.insert_landmark(Landmark::new(j as u64, *p));
            for (i, pose) in poses.iter().enumerate() {
                if let Ok(px) = cam.project(&pose.act(p)) {
                    map.insert_observation(
                        i as u64,
                        j as u64,
                        Observation { pixel: px, sigma_px: 0.5 },
                    );
                }
            }
        }
        (map, poses, lms)
    }

    #[test]
    fn robust_weight_and_cost_have_the_huber_shape() {
        let c = 5.991;
        assert_eq!(robust_weight(0.5 * c, c), 1.0);
        assert_eq!(robust_weight(c, c), 1.0);
        assert_relative_eq!(robust_weight(4.0 * c, c), 0.5, epsilon = 1e-15);
        // Cost: identity inside, continuous with matching slope at the gate.
        assert_eq!(robust_cost(0.7 * c, c), 0.7 * c);
        let eps = 1e-9;
        let below = robust_cost(c - eps, c);
        let above = robust_cost(c + eps, c);
        assert!((above - below).abs() < 1e-7);
        let slope = (robust_cost(c + 2.0 * eps, c) - above) / eps;
        assert_relative_eq!(slope, 1.0, max_relative = 1e-4);
        // Beyond the gate the cost grows like √s.
        assert_relative_eq!(robust_cost(100.0 * c, c), 2.0 * 10.0 * c - c, max_relative = 1e-12);
    }

    #[test]
    fn tracking_converges_on_exact_matches() {
        let cam = camera();
        let (map, poses, lms) = build_map(4, 60, 21, &cam);
        let truth = poses[1];
        let mut rng = ChaCha12Rng::seed_from_u64(22);

        let matches: Vec<TrackMatch> = lms
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                cam.project(&truth.act(p)).ok().map(|px| TrackMatch {
                    lm: j as u64,
                    pixel: px,
                    sigma_px: 0.5,
                })
            })
            .collect();
        assert!(matches.len() >= 20);

        let guess = truth.perturbed(&random_twist(&mut rng, 0.02, 0.05));
        let cfg = BaConfig::default();
        let out = solve_tracking(&cam, &map, &guess, &matches, &cfg, 0.5, false).unwrap();
        assert!(out.report.converged);
        assert!(
            pose_error(&out.pose, &truth) < 1e-8,
            "pose error {}",
            pose_error(&out.pose, &truth)
        );
        assert_eq!(out.report.n_outliers, 0);
        assert!(out.report.chi2_final < 1e-16);
    }

    #[test]
    fn tracking_excludes_gross_outliers() {
        let cam = camera();
        let (map, poses, lms) = build_map(4, 60, 23, &cam);
        let truth = poses[2];
        let mut rng = ChaCha12Rng::seed_from_u64(24);

        let mut matches: Vec<TrackMatch> = lms
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                cam.project(&truth.act(p)).ok().map(|px| TrackMatch {
                    lm: j as u64,
                    pixel: px,
                    sigma_px: 0.5,
                })
            })
            .collect();
        let n_bad = matches.len() / 5;
        for m in matches.iter_mut().take(n_bad) {
            m.pixel = Pixel::new(m.pixel.u + 40.0, m.pixel.v - 25.0);
        }

        let guess = truth.perturbed(&random_twist(&mut rng, 0.015, 0.04));
        let cfg = BaConfig::default();
        let out = solve_tracking(&cam, &map, &guess, &matches, &cfg, 0.5, false).unwrap();
        assert!(
            pose_error(&out.pose, &truth) < 1e-6,
            "pose error {} with outliers present",
            pose_error(&out.pose, &truth)
        );
        assert_eq!(out.report.n_outliers, n_bad);
    }

    #[test]
    fn tracking_needs_enough_matches() {
        let cam = camera();
        let (map, poses, lms) = build_map(3, 40, 25, &cam);
        let truth = poses[0];
        let matches: Vec<TrackMatch> = lms
            .iter()
            .enumerate()
            .take(2)
            .filter_map(|(j, p)| {
                cam.project(&truth.act(p)).ok().map(|px| TrackMatch {
                    lm: j as u64,
                    pixel: px,
                    sigma_px: 0.5,
                })
            })
            .collect();
        let got = matches.len();
        let err = solve_tracking(&cam, &map, &truth, &matches, &BaConfig::default(), 0.5, false)
            .unwrap_err();
        assert_eq!(err, SolveError::TooFewMatches { got, need: 3 });
    }

    #[test]
    fn point_weighting_shields_tracking_from_corrupt_landmarks() {
        let cam = camera();
        let (mut map, poses, lms) = build_map(4, 60, 26, &cam);
        let truth = poses[1];
        let mut rng = ChaCha12Rng::seed_from_u64(27);

        // Pixels from the true geometry...
        let matches: Vec<TrackMatch> = lms
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                cam.project(&truth.act(p)).ok().map(|px| TrackMatch {
                    lm: j as u64,
                    pixel: px,
                    sigma_px: 0.5,
                })
            })
            .collect();

        // ...but 40% of the map positions are displaced, with covariances
        // that honestly report the displacement scale.
        let sigma_bad = 0.25;
        for (j, _) in lms.iter().enumerate() {
            let lm = map.landmark_mut(j as u64).unwrap();
            if j % 5 < 2 {
                let d = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ) * sigma_bad;
                lm.position += d;
                lm.uncertainty = PointUncertainty::isotropic(sigma_bad);
                lm.uncertainty.n_residuals = 5;
            } else {
                lm.uncertainty = PointUncertainty::zero();
            }
        }

        let guess = truth.perturbed(&random_twist(&mut rng, 0.02, 0.05));
        let cfg = BaConfig::default();
        let off = solve_tracking(&cam, &map, &guess, &matches, &cfg, 0.5, false).unwrap();
        let on = solve_tracking(&cam, &map, &guess, &matches, &cfg, 0.5, true).unwrap();
        let (e_off, e_on) = (pose_error(&off.pose, &truth), pose_error(&on.pose, &truth));
        assert!(
            e_on < 0.5 * e_off,
            "weighted {e_on:.2e} should clearly beat unweighted {e_off:.2e}"
        );
        assert!(e_on < 0.02, "weighted tracking error {e_on:.2e}");
    }

    #[test]
    fn structure_only_ba_reaches_stationary_points() {
        let cam = camera();
        let (mut map, _poses, lms) = build_map(3, 20, 28, &cam);
        let mut rng = ChaCha12Rng::seed_from_u64(29);

        // Noisy pixels make the optimum nontrivial; perturbed starts make
        // the solve do real work.
        let kf_ids: Vec<u64> = map.keyframe_ids().collect();
        for kf in &kf_ids {
            let obs: Vec<(u64, Observation)> = map
                .observations_of_keyframe(*kf)
                .map(|(lm, o)| (lm, *o))
                .collect();
            for (lm, mut o) in obs {
                o.pixel = Pixel::new(
                    o.pixel.u + rng.sample::<f64, _>(StandardNormal),
                    o.pixel.v + rng.sample::<f64, _>(StandardNormal),
                );
                map.insert_observation(*kf, lm, o);
            }
        }
        for (j, p) in lms.iter().enumerate() {
            map.landmark_mut(j as u64).unwrap().position =
                p + Vector3::new(0.05, -0.04, 0.08);
        }

        // Half the factors end up in the robust tail (1 px noise against a
        // 0.5 px whitening), where the reweighting iteration converges only
        // linearly — give it a budget to actually get there.
        let cfg = BaConfig { max_iters: 200, ..BaConfig::default() };
        let unc = UncConfig::default();
        let report =
            solve_local_ba(&mut map, &cam, &[], &[0, 1, 2], &cfg, &unc, false, false).unwrap();
        assert!(report.converged);
        assert!(report.chi2_final < report.chi2_initial);

        // Decoupled oracle: with all poses fixed, the joint problem falls
        // apart into independent per-landmark problems. An independent
        // Gauss-Newton refinement of each landmark alone must not be able
        // to improve meaningfully on the joint solve.
        let eval_lm =
            |map: &MapState, lm_id: u64, pos: &Vector3<f64>| -> (f64, Vector3<f64>, Matrix3<f64>) {
                let mut chi2 = 0.0;
                let mut grad = Vector3::zeros();
                let mut hess = Matrix3::zeros();
                for (kf_id, obs) in map.observers_of_landmark(lm_id) {
                    let pose = map.keyframe(kf_id).unwrap().pose;
                    let q = pose.act(pos);
                    let (Ok(pred), Ok(j_pi)) = (cam.project(&q), cam.jacobian_project(&q))
                    else {
                        continue;
                    };
                    let w = MeasurementNoise::isotropic(0.5).0.invert_spd();
                    let r = Vector2::new(pred.u - obs.pixel.u, pred.v - obs.pixel.v);
                    let s = (r.transpose() * w * r)[(0, 0)];
                    chi2 += robust_cost(s, cfg.huber_chi2);
                    let jl = j_pi * pose.rotation_matrix();
                    let info = w * robust_weight(s, cfg.huber_chi2);
                    grad += jl.transpose() * info * r;
                    hess += jl.transpose() * info * jl;
                }
                (chi2, grad, hess)
            };

        for lm_id in map.landmark_ids().collect::<Vec<_>>() {
            let solved = map.landmark(lm_id).unwrap().position;
            let (chi2_solved, _, _) = eval_lm(&map, lm_id, &solved);
            let mut x = solved;
            let mut chi2 = chi2_solved;
            for _ in 0..10 {
                let (_, g, h) = eval_lm(&map, lm_id, &x);
                let mut step = -((h + Matrix3::identity() * 1e-9).invert_spd() * g);
                for _ in 0..6 {
                    let (c, _, _) = eval_lm(&map, lm_id, &(x + step));
                    if c < chi2 {
                        x += step;
                        chi2 = c;
                        break;
                    }
                    step *= 0.5;
                }
            }
            assert!(
                chi2_solved - chi2 < 1e-4,
                "landmark {lm_id}: independent refinement recovered {:.2e} cost",
                chi2_solved - chi2
            );
            assert!(
                (x - solved).norm() < 1e-3,
                "landmark {lm_id}: independent refinement moved it {:.2e}",
                (x - solved).norm()
            );
        }
    }

    /// With a single anchored pose a reprojection-only problem keeps a
    /// scale freedom (scaling the map about the anchor's optical center
    /// changes no residual), so exact recovery is only checkable with two
    /// anchors. This test pins keyframes 0 and 1 and requires the rest of
    /// the map back to machine precision.
    #[test]
    fn ba_recovers_a_perturbed_map_with_two_anchors() {
        let cam = camera();
        let (mut map, poses, lms) = build_map(8, 120, 30, &cam);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let scale = map.trajectory_extent();

        for i in 2..poses.len() as u64 {
            let kf = map.keyframe_mut(i).unwrap();
            kf.pose = kf.pose.perturbed(&random_twist(&mut rng, 0.01, 0.01 * scale));
        }
        for j in 0..lms.len() as u64 {
            let lm = map.landmark_mut(j).unwrap();
            let d = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * 0.01
                * scale;
            lm.position += d;
        }

        let cfg = BaConfig::default();
        let unc = UncConfig::default();
        let free: Vec<KeyframeId> = (2..poses.len() as u64).collect();
        let report =
            solve_local_ba(&mut map, &cam, &free, &[0, 1], &cfg, &unc, false, false).unwrap();
        assert!(report.converged, "not converged in {} iterations", report.iterations);
        assert!(report.iterations <= cfg.max_iters);
        assert!(report.chi2_final < 1e-12, "chi2_final {}", report.chi2_final);

        for (i, truth) in poses.iter().enumerate() {
            let got = map.keyframe(i as u64).unwrap().pose;
            let err = (got.center() - truth.center()).norm();
            assert!(err < 1e-6 * scale, "keyframe {i} center error {err:.2e}");
        }
        for (j, truth) in lms.iter().enumerate() {
            let err = (map.landmark(j as u64).unwrap().position - truth).norm();
            assert!(err < 1e-5 * scale, "landmark {j} error {err:.2e}");
        }
        // The free keyframes got their information blocks refreshed.
        assert!(map.keyframe(2).unwrap().hessian.is_some());
        assert!(map.keyframe(0).unwrap().hessian.is_none());
    }

    /// Starting a full-map adjustment at an exactly consistent state must
    /// keep it there: the oldest keyframe pins the gauge and never moves,
    /// and everything else stays put because the cost is already zero.
    #[test]
    fn global_ba_holds_an_exact_map_and_pins_the_oldest_keyframe() {
        let cam = camera();
        let (mut map, poses, lms) = build_map(6, 80, 39, &cam);
        let scale = map.trajectory_extent();

        let report = solve_global_ba(
            &mut map,
            &cam,
            &BaConfig::default(),
            &UncConfig::default(),
            false,
            false,
        )
        .unwrap();
        assert!(report.converged);
        assert!(report.chi2_final < 1e-12);
        assert_eq!(map.keyframe(0).unwrap().pose.rotation, poses[0].rotation);
        assert_eq!(map.keyframe(0).unwrap().pose.translation, poses[0].translation);
        for (i, truth) in poses.iter().enumerate() {
            let got = map.keyframe(i as u64).unwrap().pose;
            assert!((got.center() - truth.center()).norm() < 1e-9 * scale);
        }
        for (j, truth) in lms.iter().enumerate() {
            assert!((map.landmark(j as u64).unwrap().position - truth).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn zeroed_uncertainties_reproduce_the_classical_solve_bit_for_bit() {
        let cam = camera();
        let (map0, poses, lms) = build_map(5, 60, 32, &cam);
        let mut rng = ChaCha12Rng::seed_from_u64(33);

        // Shared perturbed starting map; all uncertainties are zero
        // by construction (fresh Keyframe/Landmark).
        let mut base = map0.clone();
        for i in 1..poses.len() as u64 {
            let kf = base.keyframe_mut(i).unwrap();
            kf.pose = kf.pose.perturbed(&random_twist(&mut rng, 0.008, 0.02));
        }
        for j in 0..lms.len() as u64 {
            base.landmark_mut(j).unwrap().position += Vector3::new(0.02, -0.03, 0.01);
        }

        let cfg = BaConfig::default();
        let unc = UncConfig::default();

        let mut classical = base.clone();
        let rep_c =
            solve_global_ba(&mut classical, &cam, &cfg, &unc, false, false).unwrap();
        let mut weighted = base.clone();
        let rep_w = solve_global_ba(&mut weighted, &cam, &cfg, &unc, true, true).unwrap();

        assert_eq!(rep_c.chi2_final.to_bits(), rep_w.chi2_final.to_bits());
        assert_eq!(rep_c.iterations, rep_w.iterations);
        for id in classical.keyframe_ids().collect::<Vec<_>>() {
            assert_eq!(
                classical.keyframe(id).unwrap().pose,
                weighted.keyframe(id).unwrap().pose,
                "keyframe {id} diverged between arms"
            );
        }
        for id in classical.landmark_ids().collect::<Vec<_>>() {
            assert_eq!(
                classical.landmark(id).unwrap().position,
                weighted.landmark(id).unwrap().position,
                "landmark {id} diverged between arms"
            );
        }
    }

    #[test]
    fn pose_weighting_discounts_unreliable_anchors() {
        let cam = camera();
        let mut rng = ChaCha12Rng::seed_from_u64(35);

        // Inward-looking rig: four cameras on a ring, all watching the same
        // compact cloud near the origin, so every camera constrains every
        // landmark. Keyframe 1 is an anchor whose stored pose is wrong (as
        // if it had drifted), with a covariance that says so; observations
        // were made from the true pose, so its factors are inconsistent.
        // Keyframes 0 and 3 are trusted anchors; together they pin the
        // gauge (including scale) even when keyframe 1's factors get
        // discounted to nothing.
        let mut poses = Vec::new();
        for k in 0..4u32 {
            let az = f64::from(k) * std::f64::consts::FRAC_PI_2;
            let center = Vector3::new(2.0 * az.cos(), 2.0 * az.sin(), 0.3);
            poses.push(look_at(center, Vector3::zeros()));
        }
        let mut lms = Vec::new();
        while lms.len() < 50 {
            let p = Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            );
            if p.norm() < 0.8 {
                lms.push(p);
            }
        }
        let mut map0 = MapState::new();
        for (i, pose) in poses.iter().enumerate() {
            map0.insert_keyframe(Keyframe::new(i as u64, i as u64, i as f64, *pose));
        }
        for (j, p) in lms.iter().enumerate() {
            map0.insert_landmark(Landmark::new(j as u64, *p));
            for (i, pose) in poses.iter().enumerate() {
                let px = cam.project(&pose.act(p)).unwrap();
                map0.insert_observation(
                    i as u64,
                    j as u64,
                    Observation { pixel: px, sigma_px: 0.5 },
                );
            }
        }

        let drift = Twist(Vector6::new(0.02, -0.015, 0.01, 0.12, -0.1, 0.08));
        let mut base = map0.clone();
        base.keyframe_mut(1).unwrap().pose = poses[1].perturbed(&drift);

        // Free keyframe 2 starts perturbed; landmarks start perturbed.
        base.keyframe_mut(2).unwrap().pose =
            poses[2].perturbed(&random_twist(&mut rng, 0.01, 0.03));
        for j in 0..lms.len() as u64 {
            let d = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * 0.02;
            base.landmark_mut(j).unwrap().position += d;
        }

        let run = |use_pose_unc: bool| -> (f64, f64) {
            let mut map = base.clone();
            // Anchor covariances: keyframes 0 and 3 are trusted (zero
            // covariance), keyframe 1 is not.
            map.keyframe_mut(1).unwrap().uncertainty.sigma = {
                let mut s = Matrix6::zeros();
                for i in 0..3 {
                    s[(i, i)] = 0.03 * 0.03;
                    s[(i + 3, i + 3)] = 0.15 * 0.15;
                }
                s
            };
            solve_local_ba(
                &mut map,
                &cam,
                &[2],
                &[0, 1, 3],
                &BaConfig::default(),
                &UncConfig::default(),
                false,
                use_pose_unc,
            )
            .unwrap();
            let pose_err = pose_error(&map.keyframe(2).unwrap().pose, &poses[2]);
            // Only landmarks that entered the problem are comparable.
            let in_problem: Vec<u64> =
                map.observations_of_keyframe(2).map(|(lm, _)| lm).collect();
            let lm_err = in_problem
                .iter()
                .map(|j| (map.landmark(*j).unwrap().position - lms[*j as usize]).norm())
                .sum::<f64>()
                / in_problem.len() as f64;
            (pose_err, lm_err)
        };

        let (pose_off, lm_off) = run(false);
        let (pose_on, lm_on) = run(true);
        assert!(
            pose_on < 0.5 * pose_off,
            "pose error with weighting {pose_on:.2e} vs without {pose_off:.2e}"
        );
        assert!(
            lm_on < 0.5 * lm_off,
            "landmark error with weighting {lm_on:.2e} vs without {lm_off:.2e}"
        );
    }

    #[test]
    fn empty_map_is_gauge_underconstrained() {
        let cam = camera();
        let mut map = MapState::new();
        let err = solve_global_ba(
            &mut map,
            &cam,
            &BaConfig::default(),
            &UncConfig::default(),
            false,
            false,
        )
        .unwrap_err();
        assert_eq!(err, SolveError::GaugeUnderconstrained);
    }

    #[test]
    fn tracking_hessian_matches_manual_information() {
        let cam = camera();
        let (map, poses, lms) = build_map(3, 40, 36, &cam);
        let truth = poses[0];
        let matches: Vec<TrackMatch> = lms
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                cam.project(&truth.act(p)).ok().map(|px| TrackMatch {
                    lm: j as u64,
                    pixel: px,
                    sigma_px: 0.5,
                })
            })
            .collect();
        let out =
            solve_tracking(&cam, &map, &truth, &matches, &BaConfig::default(), 0.5, false)
                .unwrap();

        // Rebuild JᵀΣ⁻¹J from the public pieces at the solved pose. All
        // residuals are ~0 so every robust weight is 1.
        let mut manual = Matrix6::zeros();
        let w = MeasurementNoise::isotropic(0.5).0.invert_spd();
        for m in &matches {
            let p = map.landmark(m.lm).unwrap().position;
            let q = out.pose.act(&p);
            let j_pi = cam.jacobian_project(&q).unwrap();
            let jp = j_pi * jacobian_pose_perturbation(&out.pose, &p);
            manual += jp.transpose() * w * jp;
        }
        assert_relative_eq!(out.hessian, manual, max_relative = 1e-10);
        assert!(out.hessian.cholesky().is_some(), "information must be PD");
    }
}
