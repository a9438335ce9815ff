//! Camera models for wide and ultra-wide field-of-view lenses.
//!
//! Both supported models map a camera-frame direction to a pixel through a
//! polynomial radial profile and differ only in the angle the polynomial is
//! parameterized by:
//!
//! * [`CameraKind::Taylor`]: omnidirectional model for catadioptric /
//!   panoramic-annular lenses. The radius polynomial `ρ(θ) = a₀ + a₁θ + …`
//!   takes the **elevation** angle `θ = atan2(z, √(x²+y²))`, measured from
//!   the sensor plane towards the optical axis. Negative elevations (points
//!   "behind" the sensor plane) are first-class citizens — annular lenses
//!   routinely see them.
//! * [`CameraKind::KannalaBrandt`]: fisheye model with an odd polynomial
//!   `ρ(θ) = k₁θ + k₂θ³ + k₃θ⁵ + …` in the **incidence** angle
//!   `θ = atan2(√(x²+y²), z)` from the optical axis. The two angle
//!   conventions are complementary (`θ_inc = π/2 − θ_elev`), so the valid
//!   field of view is expressed as an elevation interval for both kinds.
//!
//! In either case the pixel is `u = ρ(θ)·h(p) + c` where `h(p) = (x, y)/√(x²+y²)`
//! is the in-plane direction and `c` the principal point.
//!
//! Unprojection inverts `ρ` numerically (safeguarded Newton on the strictly
//! monotonic profile), which is exact for synthetic cameras; a calibrated
//! back-projection polynomial `z_p(r)` can be supplied instead for Taylor
//! models, in which case the bearing is `normalize(Δu, Δv, z_p(r))`.

use nalgebra::{Matrix2x3, UnitVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Unit direction in the camera frame.
pub type Bearing = UnitVector3<f64>;

/// Angle between two unit vectors via the chord length; unlike `acos(a·b)`
/// this stays accurate down to zero (no noise floor at ~1e-8 rad).
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    2.0 * ((a - b).norm() / 2.0).clamp(0.0, 1.0).asin()
}

/// Image point in pixels, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn coords(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.coords() - other.coords()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Taylor,
    KannalaBrandt,
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    /// Direction (or pixel radius) falls outside the calibrated field of view.
    #[error("direction outside the calibrated field of view")]
    OutOfFov,
    /// On the optical axis the in-plane direction `h(p)` is undefined.
    #[error("degenerate direction: x = y = 0 has no in-plane component")]
    Degenerate,
    /// Numeric inversion of the radius profile did not converge (indicative
    /// of a barely-monotonic profile; the dense construction check makes
    /// this unreachable for sane calibrations).
    #[error("radius inversion did not converge at r = {radius}")]
    NoConvergence { radius: f64 },
    /// Parameters rejected at construction.
    #[error("invalid camera model: {0}")]
    InvalidModel(String),
}

/// Calibrated wide-FoV camera.
///
/// Construction validates the parameters once (monotonic radius profile,
/// principal point inside the image, sane elevation interval) so the hot
/// projection paths can assume they hold.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    kind: CameraKind,
    rho_coeffs: Vec<f64>,
    /// Derivative coefficients of the native-angle radius polynomial.
    drho_coeffs: Vec<f64>,
    zp_coeffs: Option<Vec<f64>>,
    principal_point: Pixel,
    /// Valid elevation interval `(θ_min, θ_max)` in radians.
    elevation_range: (f64, f64),
    image_size: (u32, u32),
    /// Valid pixel-radius interval, derived from `ρ` at the FoV limits.
    radius_range: (f64, f64),
}

/// Samples used by the construction-time monotonicity check.
const MONOTONICITY_SAMPLES: usize = 1024;

/// Slack applied to FoV boundary comparisons, in radians / pixels.
const BOUNDARY_TOL: f64 = 1e-9;

impl CameraModel {
    /// Builds and validates a camera model.
    ///
    /// `rho_coeffs` are the dense polynomial coefficients in the elevation
    /// angle for [`CameraKind::Taylor`] (constant term first), or the odd
    /// coefficients `k₁, k₂, …` of the incidence-angle polynomial for
    /// [`CameraKind::KannalaBrandt`]. `elevation_range` is `(θ_min, θ_max)`
    /// in radians with `−π/2 < θ_min < θ_max ≤ π/2`.
    pub fn new(
        kind: CameraKind,
        rho_coeffs: Vec<f64>,
        zp_coeffs: Option<Vec<f64>>,
        principal_point: Pixel,
        elevation_range: (f64, f64),
        image_size: (u32, u32),
    ) -> Result<Self, CameraError> {
        let invalid = |msg: &str| Err(CameraError::InvalidModel(msg.to_string()));

        if rho_coeffs.is_empty() || !rho_coeffs.iter().all(|c| c.is_finite()) {
            return invalid("radius polynomial must be non-empty and finite");
        }
        let (theta_min, theta_max) = elevation_range;
        if !(theta_min.is_finite() && theta_max.is_finite())
            || theta_min <= -FRAC_PI_2
            || theta_max > FRAC_PI_2 + BOUNDARY_TOL
            || theta_min >= theta_max
        {
            return invalid("elevation range must satisfy -pi/2 < min < max <= pi/2");
        }
        let (w, h) = image_size;
        if w == 0 || h == 0 {
            return invalid("image size must be positive");
        }
        if principal_point.u <= 0.0
            || principal_point.u >= w as f64
            || principal_point.v <= 0.0
            || principal_point.v >= h as f64
        {
            return invalid("principal point must lie inside the image");
        }
        if kind == CameraKind::KannalaBrandt && zp_coeffs.is_some() {
            return invalid("back-projection polynomial only applies to the Taylor kind");
        }
        if let Some(zp) = &zp_coeffs {
            if zp.is_empty() || !zp.iter().all(|c| c.is_finite()) {
                return invalid("back-projection polynomial must be non-empty and finite");
            }
        }

        // Expand the KB odd coefficients into a dense polynomial in the
        // native angle so both kinds share evaluation machinery.
        let dense = match kind {
            CameraKind::Taylor => rho_coeffs.clone(),
            CameraKind::KannalaBrandt => {
                let mut dense = vec![0.0; rho_coeffs.len() * 2];
                for (j, k) in rho_coeffs.iter().enumerate() {
                    dense[2 * j + 1] = *k;
                }
                dense
            }
        };
        let drho: Vec<f64> = dense
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| i as f64 * c)
            .collect();

        let mut model = CameraModel {
            kind,
            rho_coeffs: dense,
            drho_coeffs: drho,
            zp_coeffs,
            principal_point,
            elevation_range,
            image_size,
            radius_range: (0.0, 0.0),
        };

        // Strict monotonicity and non-negativity of ρ over the native
        // domain, checked by dense sampling.
        let (lo, hi) = model.native_domain();
        let mut prev = model.rho(lo);
        let mut direction = 0.0f64;
        for i in 1..=MONOTONICITY_SAMPLES {
            let t = lo + (hi - lo) * i as f64 / MONOTONICITY_SAMPLES as f64;
            let value = model.rho(t);
            let step = value - prev;
            if step == 0.0 || (direction != 0.0 && step.signum() != direction) {
                return invalid("radius polynomial is not strictly monotonic over the FoV");
            }
            direction = step.signum();
            prev = value;
        }
        let (r_a, r_b) = (model.rho(lo), model.rho(hi));
        let (r_lo, r_hi) = if r_a <= r_b { (r_a, r_b) } else { (r_b, r_a) };
        if r_lo < -BOUNDARY_TOL {
            return invalid("radius polynomial is negative inside the FoV");
        }
        model.radius_range = (r_lo.max(0.0), r_hi);
        Ok(model)
    }

    /// Synthetic panoramic-annular camera used as the default rig: 1280×960
    /// image, elevation −30°…+50°, decreasing Taylor profile (the annulus
    /// inner edge looks up, the outer edge looks down).
    pub fn wide_annular_default() -> Self {
        CameraModel::new(
            CameraKind::Taylor,
            vec![347.5, -215.0, -10.0],
            None,
            Pixel::new(640.0, 480.0),
            ((-30.0f64).to_radians(), 50.0f64.to_radians()),
            (1280, 960),
        )
        .expect("default annular camera parameters are valid")
    }

    /// Synthetic full-fisheye camera: 512×512 image, elevation −5°…+90°
    /// (190° total FoV), near-equidistant Kannala-Brandt profile.
    pub fn fisheye_default() -> Self {
        CameraModel::new(
            CameraKind::KannalaBrandt,
            vec![150.0, 2.0, -1.2, 0.08],
            None,
            Pixel::new(256.0, 256.0),
            ((-5.0f64).to_radians(), 90.0f64.to_radians()),
            (512, 512),
        )
        .expect("default fisheye camera parameters are valid")
    }

    pub fn kind(&self) -> CameraKind {
        self.kind
    }

    pub fn principal_point(&self) -> Pixel {
        self.principal_point
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Valid elevation interval `(θ_min, θ_max)` in radians.
    pub fn elevation_range(&self) -> (f64, f64) {
        self.elevation_range
    }

    /// Valid pixel-radius interval around the principal point.
    pub fn radius_range(&self) -> (f64, f64) {
        self.radius_range
    }

    /// Mean angular resolution along the radial direction: elevation span
    /// over pixel-radius span. A one-pixel measurement error perturbs a
    /// bearing by roughly this many radians, which is the conversion that
    /// turns pixel noise levels into angular inlier gates.
    pub fn radians_per_pixel(&self) -> f64 {
        let (e_min, e_max) = self.elevation_range;
        let (r_lo, r_hi) = self.radius_range;
        (e_max - e_min) / (r_hi - r_lo).max(f64::EPSILON)
    }

    pub fn contains_pixel(&self, px: &Pixel) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u < self.image_size.0 as f64
            && px.v < self.image_size.1 as f64
    }

    /// Elevation angle of a camera-frame point above the sensor plane,
    /// `atan2(z, √(x²+y²))`, regardless of FoV.
    pub fn elevation(p: &Vector3<f64>) -> Result<f64, CameraError> {
        let s = p.x.hypot(p.y);
        if s == 0.0 {
            return Err(CameraError::Degenerate);
        }
        Ok(p.z.atan2(s))
    }

    fn elevation_in_fov(&self, elev: f64) -> bool {
        elev >= self.elevation_range.0 - BOUNDARY_TOL
            && elev <= self.elevation_range.1 + BOUNDARY_TOL
    }

    /// Whether the positive optical axis itself is inside the FoV (only
    /// possible when the elevation range reaches +90°).
    fn axis_in_fov(&self) -> bool {
        self.elevation_range.1 >= FRAC_PI_2 - BOUNDARY_TOL
    }

    /// Native angle of the radius polynomial: elevation for Taylor,
    /// incidence for Kannala-Brandt.
    fn native_angle(&self, s: f64, z: f64) -> f64 {
        match self.kind {
            CameraKind::Taylor => z.atan2(s),
            CameraKind::KannalaBrandt => s.atan2(z),
        }
    }

    /// Native-angle domain corresponding to the elevation range, ordered.
    fn native_domain(&self) -> (f64, f64) {
        let (e_min, e_max) = self.elevation_range;
        match self.kind {
            CameraKind::Taylor => (e_min, e_max),
            CameraKind::KannalaBrandt => (FRAC_PI_2 - e_max, FRAC_PI_2 - e_min),
        }
    }

    fn rho(&self, native: f64) -> f64 {
        poly_eval(&self.rho_coeffs, native)
    }

    fn drho(&self, native: f64) -> f64 {
        poly_eval(&self.drho_coeffs, native)
    }

    /// Projects a camera-frame point to a pixel.
    ///
    /// The point may be at any positive distance (the map only depends on
    /// the direction). The result can land outside the image bounds — wide
    /// lenses legitimately do that, so bounds are the caller's concern.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Pixel, CameraError> {
        let s = p.x.hypot(p.y);
        if s == 0.0 {
            // On-axis limit: all in-plane directions collapse; by convention
            // the image is the principal point when the axis is in the FoV.
            if p.z > 0.0 && self.axis_in_fov() {
                return Ok(self.principal_point);
            }
            if p.z == 0.0 {
                return Err(CameraError::Degenerate);
            }
            return Err(CameraError::OutOfFov);
        }
        let elev = p.z.atan2(s);
        if !self.elevation_in_fov(elev) {
            return Err(CameraError::OutOfFov);
        }
        let rho = self.rho(self.native_angle(s, p.z));
        Ok(Pixel::new(
            self.principal_point.u + rho * p.x / s,
            self.principal_point.v + rho * p.y / s,
        ))
    }

    /// Back-projects a pixel to the unit bearing whose projection is `px`.
    pub fn unproject(&self, px: &Pixel) -> Result<Bearing, CameraError> {
        let du = px.u - self.principal_point.u;
        let dv = px.v - self.principal_point.v;
        let r = du.hypot(dv);
        let (r_lo, r_hi) = self.radius_range;
        let tol = BOUNDARY_TOL * (1.0 + r_hi);
        if r < r_lo - tol || r > r_hi + tol {
            return Err(CameraError::OutOfFov);
        }
        if r == 0.0 {
            // Only reachable when ρ vanishes inside the FoV, i.e. the
            // optical axis is visible.
            return Ok(UnitVector3::new_unchecked(Vector3::z()));
        }
        let dir = Vector2::new(du / r, dv / r);

        if let Some(zp) = &self.zp_coeffs {
            // Calibrated back-projection: p' = (Δu, Δv, z_p(r)).
            let z = poly_eval(zp, r);
            return Ok(UnitVector3::new_normalize(Vector3::new(du, dv, z)));
        }

        let native = self.invert_rho(r.clamp(r_lo, r_hi))?;
        Ok(self.bearing_from_native(native, &dir))
    }

    /// Unit bearing for a native angle and in-plane direction.
    fn bearing_from_native(&self, native: f64, dir: &Vector2<f64>) -> Bearing {
        let v = match self.kind {
            CameraKind::Taylor => {
                let (sin_e, cos_e) = native.sin_cos();
                Vector3::new(cos_e * dir.x, cos_e * dir.y, sin_e)
            }
            CameraKind::KannalaBrandt => {
                let (sin_i, cos_i) = native.sin_cos();
                Vector3::new(sin_i * dir.x, sin_i * dir.y, cos_i)
            }
        };
        // sin²+cos² keeps the norm within one ulp of 1; normalize anyway so
        // the unit invariant holds bit-for-bit downstream.
        UnitVector3::new_normalize(v)
    }

    /// Solves `ρ(θ) = r` over the native domain with safeguarded Newton
    /// (bisection fallback keeps the iterate inside the bracket, so the
    /// monotonic profile guarantees convergence).
    fn invert_rho(&self, r: f64) -> Result<f64, CameraError> {
        let (lo, hi) = self.native_domain();
        let (f_lo, f_hi) = (self.rho(lo) - r, self.rho(hi) - r);
        let increasing = f_hi > f_lo;
        let (mut a, mut b, mut f_a) = if increasing {
            (lo, hi, f_lo)
        } else {
            (hi, lo, f_hi)
        };
        // Invariant: f(a) <= 0 <= f(b).
        let mut theta = a + (b - a) * 0.5;
        let scale = 1.0 + r.abs();
        for _ in 0..100 {
            let f = self.rho(theta) - r;
            if f.abs() <= 1e-12 * scale {
                return Ok(theta);
            }
            if f < 0.0 {
                a = theta;
                f_a = f;
            } else {
                b = theta;
            }
            let d = self.drho(theta);
            let newton = theta - f / d;
            let inside = if a < b {
                newton > a && newton < b
            } else {
                newton > b && newton < a
            };
            theta = if d != 0.0 && inside {
                newton
            } else {
                a + (b - a) * 0.5
            };
            if (b - a).abs() < 1e-15 {
                let _ = f_a;
                return Ok(theta);
            }
        }
        Err(CameraError::NoConvergence { radius: r })
    }

    /// Analytic projection Jacobian `∂π/∂p` (2×3) at a camera-frame point.
    ///
    /// Chain rule over the two paths a point perturbation can take into the
    /// pixel: through the radial profile (`h·ρ'·∂θ/∂p`) and through the
    /// in-plane direction (`ρ·∂h/∂p`).
    pub fn jacobian_project(&self, p: &Vector3<f64>) -> Result<Matrix2x3<f64>, CameraError> {
        let s = p.x.hypot(p.y);
        if s == 0.0 {
            return Err(CameraError::Degenerate);
        }
        let elev = p.z.atan2(s);
        if !self.elevation_in_fov(elev) {
            return Err(CameraError::OutOfFov);
        }
        let native = self.native_angle(s, p.z);
        let rho = self.rho(native);
        let drho = self.drho(native);
        let n2 = s * s + p.z * p.z;
        let h = Vector2::new(p.x / s, p.y / s);

        // ∂θ/∂p for the native angle of this kind.
        let dtheta = match self.kind {
            CameraKind::Taylor => {
                Vector3::new(-p.z * p.x / (s * n2), -p.z * p.y / (s * n2), s / n2)
            }
            CameraKind::KannalaBrandt => {
                Vector3::new(p.z * p.x / (s * n2), p.z * p.y / (s * n2), -s / n2)
            }
        };

        // ∂h/∂p: derivative of the unit in-plane direction.
        let s3 = s * s * s;
        let dh = Matrix2x3::new(
            p.y * p.y / s3,
            -p.x * p.y / s3,
            0.0, //
            -p.x * p.y / s3,
            p.x * p.x / s3,
            0.0,
        );

        Ok(h * (drho * dtheta.transpose()) + dh * rho)
    }
}

/// Horner evaluation, constant term first.
fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}
