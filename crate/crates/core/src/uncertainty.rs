//! Landmark and keyframe uncertainty: estimation from reprojection history
//! and first-order propagation into measurement space.
//!
//! The backend treats map entities as distributions, not point estimates.
//! Each landmark carries a 3×3 world-frame covariance estimated from the
//! spread of its recent observation residuals; each keyframe carries a 6×6
//! covariance over its pose perturbation, recovered from the Hessian of the
//! last solve that touched it. During optimization both are pushed through
//! the projection Jacobians into pixel space, where they fatten the
//! measurement covariance of the corresponding factors: an observation of a
//! poorly-constrained landmark, or one anchored to a wobbly fixed keyframe,
//! should pull on the solution less than a textbook-perfect one.
//!
//! Two conventions matter throughout:
//!
//! * Landmark residuals are **second moments about zero**, not about the
//!   sample mean. A converged bundle adjustment already drives the mean
//!   residual toward zero; what is left — including any systematic bias a
//!   bad landmark carries — is exactly the signal we want in the
//!   covariance. Centering would launder a bias into a mean and report the
//!   landmark as more trustworthy than it is.
//! * Every covariance that leaves this module has been symmetrized and
//!   projected to positive semidefinite, and every inversion goes through
//!   [`invert_spd`]. One shared code path keeps the weighting numerically
//!   identical between the uncertainty-aware and classical configurations
//!   whenever the propagated terms vanish.

use crate::camera::{CameraError, CameraModel, Pixel};
use crate::config::UncConfig;
use crate::map::MapState;
use crate::se3::{jacobian_pose_perturbation, Pose};
use nalgebra::{Matrix2, Matrix3, Matrix6, SymmetricEigen, Vector3};

/// 3×3 world-frame covariance of a landmark position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointUncertainty {
    pub sigma: Matrix3<f64>,
    /// How many residuals produced `sigma`; 0 or 1 means it is a prior.
    pub n_residuals: usize,
}

impl PointUncertainty {
    pub fn zero() -> Self {
        PointUncertainty {
            sigma: Matrix3::zeros(),
            n_residuals: 0,
        }
    }

    pub fn isotropic(sigma: f64) -> Self {
        PointUncertainty {
            sigma: Matrix3::identity() * sigma * sigma,
            n_residuals: 0,
        }
    }
}

/// 6×6 covariance of a pose perturbation (rotation-first twist coordinates,
/// left-applied, matching `se3`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseUncertainty {
    pub sigma: Matrix6<f64>,
}

impl PoseUncertainty {
    pub fn zero() -> Self {
        PoseUncertainty {
            sigma: Matrix6::zeros(),
        }
    }
}

/// 2×2 pixel measurement covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise(pub Matrix2<f64>);

impl MeasurementNoise {
    pub fn isotropic(sigma_px: f64) -> Self {
        MeasurementNoise(Matrix2::identity() * sigma_px * sigma_px)
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// Matrix hygiene
// ---------------------------------------------------------------------------

/// Matrix hygiene shared by every covariance in the crate.
///
/// Implemented for the square sizes the backend actually uses (2, 3, 6);
/// a macro rather than const generics because `SymmetricEigen`'s allocator
/// bounds do not propagate through a generic `D`.
pub trait SpdOps: Sized {
    /// Symmetrizes and clamps negative eigenvalues to zero.
    ///
    /// Returns the plain symmetrization untouched when no eigenvalue is
    /// negative, so numerically clean inputs pass through bit-for-bit.
    fn symmetrize_clamp(&self) -> Self;

    /// Robust SPD inverse.
    ///
    /// Symmetrizes, adds a relative jitter of `1e-12 · tr` to the diagonal
    /// and takes the Cholesky inverse. If that still fails the matrix is
    /// genuinely degenerate and we fall back to an eigendecomposition
    /// pseudo-inverse. Every covariance inversion in the crate goes through
    /// here so that identical inputs always whiten identically.
    fn invert_spd(&self) -> Self;
}

macro_rules! impl_spd_ops {
    ($($mat:ty, $dim:expr;)+) => {$(
        impl SpdOps for $mat {
            fn symmetrize_clamp(&self) -> Self {
                let sym = 0.5 * (self + self.transpose());
                let mut eig = SymmetricEigen::new(sym);
                let mut clamped = false;
                for ev in eig.eigenvalues.iter_mut() {
                    if *ev < 0.0 {
                        *ev = 0.0;
                        clamped = true;
                    }
                }
                if clamped {
                    eig.recompose()
                } else {
                    sym
                }
            }

            fn invert_spd(&self) -> Self {
                let sym = 0.5 * (self + self.transpose());
                let jitter = 1e-12 * sym.trace().abs();
                let jittered = sym + <$mat>::identity() * jitter;
                if let Some(chol) = jittered.cholesky() {
                    return chol.inverse();
                }
                let eig = SymmetricEigen::new(sym);
                let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
                let tol = 1e-15 * max_ev;
                let mut inv = <$mat>::zeros();
                for i in 0..$dim {
                    let ev = eig.eigenvalues[i];
                    if ev > tol && ev > 0.0 {
                        let col = eig.eigenvectors.column(i);
                        inv += col * col.transpose() / ev;
                    }
                }
                inv
            }
        }
    )+};
}

impl_spd_ops! {
    Matrix2<f64>, 2;
    Matrix3<f64>, 3;
    Matrix6<f64>, 6;
}

// ---------------------------------------------------------------------------
// Landmark uncertainty
// ---------------------------------------------------------------------------

/// 3D inconsistency between a landmark and one observation of it.
///
/// The measured pixel is lifted to a ray and extended to the landmark's
/// current camera-frame depth, so the comparison happens in metric space;
/// the difference is then rotated back into the world frame so residuals
/// gathered from different keyframes share a basis:
///
/// ```text
/// r = Rᵀ (q − ‖q‖ · π⁻¹(u)),   q = T·p
/// ```
pub fn point_observation_error(
    pose: &Pose,
    camera: &CameraModel,
    point: &Vector3<f64>,
    pixel: &Pixel,
) -> Result<Vector3<f64>, CameraError> {
    let q = pose.act(point);
    let bearing = camera.unproject(pixel)?;
    let r_cam = q - q.norm() * bearing.into_inner();
    Ok(pose.rotation.inverse() * r_cam)
}

/// Sample second moment of a residual cloud about zero:
/// `Σ = 1/(N−1) Σᵢ rᵢ rᵢᵀ`, projected to PSD. With fewer than two
/// residuals the isotropic prior `prior_sigma²·I` is used instead.
pub fn point_covariance(residuals: &[Vector3<f64>], prior_sigma: f64) -> Matrix3<f64> {
    if residuals.len() < 2 {
        return Matrix3::identity() * prior_sigma * prior_sigma;
    }
    let mut acc = Matrix3::zeros();
    for r in residuals {
        acc += r * r.transpose();
    }
    (acc / (residuals.len() as f64 - 1.0)).symmetrize_clamp()
}

/// Pushes a landmark's world covariance through projection into pixel
/// space: `Σᵤᵥ = (J_π R) Σ (J_π R)ᵀ + Σ_meas`.
pub fn project_point_uncertainty(
    pose: &Pose,
    camera: &CameraModel,
    point: &Vector3<f64>,
    sigma_world: &Matrix3<f64>,
    meas: &MeasurementNoise,
) -> Result<Matrix2<f64>, CameraError> {
    let q = pose.act(point);
    let j_pi = camera.jacobian_project(&q)?;
    let j = j_pi * pose.rotation_matrix();
    Ok(j * sigma_world * j.transpose() + meas.0)
}

// ---------------------------------------------------------------------------
// Pose uncertainty
// ---------------------------------------------------------------------------

/// Pushes a fixed keyframe's pose covariance through projection:
/// `Σᵤᵥ = (J_π [−q^∧ I]) Σ₆ (J_π [−q^∧ I])ᵀ + Σ_meas`.
///
/// This is the pixel-space scatter a perturbation of the *camera* induces
/// on the observation, and is what lets a solve treat measurements from a
/// shaky anchor keyframe as soft instead of gospel.
pub fn project_pose_uncertainty(
    pose: &Pose,
    camera: &CameraModel,
    point: &Vector3<f64>,
    sigma_pose: &Matrix6<f64>,
    meas: &MeasurementNoise,
) -> Result<Matrix2<f64>, CameraError> {
    let q = pose.act(point);
    let j_pi = camera.jacobian_project(&q)?;
    let j = j_pi * jacobian_pose_perturbation(pose, point);
    Ok(j * sigma_pose * j.transpose() + meas.0)
}

/// Converts the diagonal Hessian block of a converged solve into a pose
/// covariance: `Σ = (H + λI)⁻¹` with `λ = 1e-9 · tr(H)/6` guarding
/// rank-deficient blocks.
pub fn pose_covariance_from_solve(hessian: &Matrix6<f64>) -> Matrix6<f64> {
    let lambda = 1e-9 * hessian.trace() / 6.0;
    (hessian + Matrix6::identity() * lambda).invert_spd()
}

// ---------------------------------------------------------------------------
// Map-wide refresh
// ---------------------------------------------------------------------------

/// Recomputes every landmark's residual history and covariance from the
/// current map geometry, then every keyframe's covariance from its stored
/// Hessian block.
///
/// The recompute is from scratch — nothing is accumulated across calls —
/// so refreshing twice in a row is a no-op and the result never depends on
/// how the map got into its current state.
pub fn refresh_all_uncertainties(map: &mut MapState, camera: &CameraModel, cfg: &UncConfig) {
    let prior_sigma = cfg.point_prior * map.median_scene_depth().unwrap_or(1.0);

    let lm_ids: Vec<_> = map.landmark_ids().collect();
    for lm_id in lm_ids {
        let mut residuals = Vec::new();
        {
            let position = map.landmark(lm_id).unwrap().position;
            for (kf_id, obs) in map.observers_of_landmark(lm_id) {
                let kf = map.keyframe(kf_id).unwrap();
                if let Ok(r) = point_observation_error(&kf.pose, camera, &position, &obs.pixel) {
                    residuals.push(r);
                }
            }
        }
        // Keep only the most recent `max_history` residuals (observer
        // iteration is in keyframe-id order, i.e. chronological).
        if residuals.len() > cfg.max_history {
            let excess = residuals.len() - cfg.max_history;
            residuals.drain(..excess);
        }
        let lm = map.landmark_mut(lm_id).unwrap();
        lm.uncertainty = PointUncertainty {
            sigma: point_covariance(&residuals, prior_sigma),
            n_residuals: residuals.len(),
        };
        lm.residuals = residuals;
    }

    let kf_ids: Vec<_> = map.keyframe_ids().collect();
    for kf_id in kf_ids {
        let kf = map.keyframe_mut(kf_id).unwrap();
        if let Some(h) = kf.hessian {
            kf.uncertainty = PoseUncertainty {
                sigma: pose_covariance_from_solve(&h),
            };
        }
    }
}
