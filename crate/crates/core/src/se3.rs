//! Rigid-body poses on SE(3) and their tangent-space operations.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!
//! * A [`Pose`] maps **world coordinates to camera coordinates**:
//!   `p_cam = R · p_world + t`.
//! * A [`Twist`] stores the rotational part first: `ξ = (φ, ρ)` with
//!   `φ ∈ so(3)` in entries 0..3 and the translational generator `ρ` in
//!   entries 3..6. This ordering makes the pose-perturbation Jacobian of a
//!   transformed point come out as the block row `[ −(T·p)^∧  I₃ ]`, which is
//!   the form the uncertainty propagation expects.
//! * Perturbations are applied on the **left**: a solver update `δξ` moves a
//!   pose as `T ← exp(δξ) ∘ T`, i.e. the increment lives in the world frame.
//!
//! `exp`/`log` use closed-form Rodrigues formulas with second-order Taylor
//! fallbacks below `θ = 1e-8` so the small-rotation path is exact to f64
//! precision instead of dividing by a vanishing angle.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Rotation angle below which the Taylor branches of `exp`/`log` kick in.
const SMALL_ANGLE: f64 = 1e-8;

/// Margin kept from the ±π rotation cut where `log` stops being reliable.
const CUT_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum Se3Error {
    /// `log` was asked for a rotation too close to the π cut, where the
    /// axis-angle chart is numerically meaningless.
    #[error("rotation angle {angle} rad is within {CUT_MARGIN} of the pi cut")]
    NearCut { angle: f64 },
}

/// Element of the SE(3) tangent space, rotation first: `(φ, ρ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn from_parts(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&translation);
        Twist(v)
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    /// Rotational generator `φ` (axis · angle).
    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    /// Translational generator `ρ` (not the translation of `exp(ξ)` itself,
    /// which is `V(φ)·ρ`).
    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform from world to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Exponential map: `ξ = (φ, ρ) ↦ (exp(φ^∧), V(φ)·ρ)`.
    pub fn exp(xi: &Twist) -> Self {
        let phi = xi.rotation();
        let rho = xi.translation();
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(phi),
            translation: left_jacobian_so3(&phi) * rho,
        }
    }

    /// Logarithm map, the inverse of [`Pose::exp`].
    ///
    /// Fails with [`Se3Error::NearCut`] when the rotation angle is within
    /// `1e-6` of π; callers that take differences of nearby poses never get
    /// there.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let angle = self.rotation.angle();
        if angle >= std::f64::consts::PI - CUT_MARGIN {
            return Err(Se3Error::NearCut { angle });
        }
        let phi = self.rotation.scaled_axis();
        let rho = left_jacobian_inv_so3(&phi) * self.translation;
        Ok(Twist::from_parts(phi, rho))
    }

    /// Applies the transform to a world point: `R·p + t`.
    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center expressed in world coordinates, `c = −Rᵀ·t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-perturbs the pose by a twist: `exp(δξ) ∘ self`.
    pub fn perturbed(&self, delta: &Twist) -> Pose {
        Pose::exp(delta).compose(self)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Skew-symmetric (cross-product) matrix: `skew(a)·b = a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Jacobian of the transformed point w.r.t. a left perturbation of the pose.
///
/// With `q = T·p` and the rotation-first twist ordering,
///
/// ```text
/// ∂/∂δξ [ exp(δξ)·T·p ] |_{δξ=0}  =  [ −q^∧   I₃ ]      (3×6)
/// ```
pub fn jacobian_pose_perturbation(pose: &Pose, p: &Vector3<f64>) -> Matrix3x6<f64> {
    let q = pose.act(p);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

/// Left Jacobian of SO(3): `V(φ) = I + a·φ^∧ + b·(φ^∧)²` with
/// `a = (1−cosθ)/θ²`, `b = (θ−sinθ)/θ³`.
fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let hat = skew(phi);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        // 2·sin²(θ/2)/θ² ≡ (1−cosθ)/θ² without the cancellation near zero.
        let half_sin = (0.5 * theta).sin();
        (
            2.0 * half_sin * half_sin / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + hat * a + hat * hat * b
}

/// Inverse of the left Jacobian: `V⁻¹(φ) = I − ½·φ^∧ + c·(φ^∧)²` with
/// `c = 1/θ² − (1+cosθ)/(2θ·sinθ)`.
fn left_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let hat = skew(phi);
    let c = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - hat * 0.5 + hat * hat * c
}
