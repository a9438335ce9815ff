//! Run configuration: one JSON document covering every module.
//!
//! All sections and fields have defaults, so `{}` is a valid config and a
//! partial document only overrides what it mentions. Unknown keys are
//! rejected everywhere — a typo'd knob should fail loudly, not silently run
//! the defaults. Values can also be patched from the command line with
//! repeated `--set a.b.c=value` overrides, applied to the JSON tree before
//! deserialization so they go through exactly the same validation.

use crate::camera::{CameraError, CameraKind, CameraModel, Pixel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid override `{0}`: expected key.path=value")]
    MalformedOverride(String),
    #[error("override path `{0}` does not address an object field")]
    BadOverridePath(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("config value out of range: {0}")]
    OutOfRange(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub camera: CameraConfig,
    pub unc: UncConfig,
    pub ba: BaConfig,
    pub init: InitConfig,
    #[serde(rename = "loop")]
    pub loop_closing: LoopConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
    pub sim: SimConfig,
    /// Base seed for every stochastic component (simulation streams, RANSAC).
    pub seed: u64,
}

impl RunConfig {
    /// Parses a config from JSON text and applies `--set` style overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree: serde_json::Value = serde_json::from_str(text)?;
        if !tree.is_object() {
            return Err(ConfigError::OutOfRange(
                "top-level config must be a JSON object".into(),
            ));
        }
        for entry in overrides {
            apply_override(&mut tree, entry)?;
        }
        let config: RunConfig = serde_json::from_value(tree)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), ConfigError> {
        // Camera parameters get their real validation in the model itself.
        self.camera.build()?;
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange(what.to_string()))
            }
        };
        check(self.unc.point_prior > 0.0, "unc.point_prior must be > 0")?;
        check(self.unc.max_history >= 2, "unc.max_history must be >= 2")?;
        check(self.unc.pixel_sigma > 0.0, "unc.pixel_sigma must be > 0")?;
        check(self.ba.window >= 1, "ba.window must be >= 1")?;
        check(self.ba.max_iters >= 1, "ba.max_iters must be >= 1")?;
        check(self.ba.huber_chi2 > 0.0, "ba.huber_chi2 must be > 0")?;
        check(self.ba.lambda0 > 0.0, "ba.lambda0 must be > 0")?;
        check(
            self.init.ransac_thresh_rad > 0.0,
            "init.ransac_thresh_rad must be > 0",
        )?;
        check(self.init.ransac_iters >= 1, "init.ransac_iters must be >= 1")?;
        check(
            (0.0..=1.0).contains(&self.init.min_inlier_ratio),
            "init.min_inlier_ratio must be in [0, 1]",
        )?;
        check(
            self.init.min_parallax_deg >= 0.0,
            "init.min_parallax_deg must be >= 0",
        )?;
        check(
            self.loop_closing.radius_frac > 0.0,
            "loop.radius_frac must be > 0",
        )?;
        check(
            (0.0..=1.0).contains(&self.loop_closing.min_inlier_ratio),
            "loop.min_inlier_ratio must be in [0, 1]",
        )?;
        check(self.eval.assoc_tol_s > 0.0, "eval.assoc_tol_s must be > 0")?;
        check(self.eval.rpe_delta_m > 0.0, "eval.rpe_delta_m must be > 0")?;
        check(self.run.kf_every >= 1, "run.kf_every must be >= 1")?;
        check(self.sim.n_landmarks >= 1, "sim.n_landmarks must be >= 1")?;
        check(
            self.sim.shell.r_min > 0.0 && self.sim.shell.r_max > self.sim.shell.r_min,
            "sim.shell radii must satisfy 0 < r_min < r_max",
        )?;
        check(self.sim.pixel_sigma >= 0.0, "sim.pixel_sigma must be >= 0")?;
        check(
            (0.0..=1.0).contains(&self.sim.jitter_frac),
            "sim.jitter_frac must be in [0, 1]",
        )?;
        check(
            self.sim.jitter_sigma_frac >= 0.0,
            "sim.jitter_sigma_frac must be >= 0",
        )?;
        check(
            (0.0..=1.0).contains(&self.sim.outlier_rate),
            "sim.outlier_rate must be in [0, 1]",
        )?;
        check(
            (0.0..1.0).contains(&self.sim.dropout_rate),
            "sim.dropout_rate must be in [0, 1)",
        )?;
        check(self.sim.dt > 0.0, "sim.dt must be > 0")?;
        Ok(())
    }
}

/// Calibration block. Angles are written in degrees in the file (that is
/// what calibration sheets use); they become radians in the built model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub kind: CameraKind,
    /// Radius polynomial: dense coefficients (Taylor) or odd coefficients
    /// k₁, k₂, … (Kannala-Brandt).
    pub rho: Vec<f64>,
    /// Optional calibrated back-projection polynomial z_p(r) (Taylor only).
    pub zp: Option<Vec<f64>>,
    /// Principal point (u, v) in pixels.
    pub pp: [f64; 2],
    /// Valid elevation interval in degrees.
    pub elev_deg: [f64; 2],
    /// Image width and height in pixels.
    pub size: [u32; 2],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            kind: CameraKind::Taylor,
            rho: vec![347.5, -215.0, -10.0],
            zp: None,
            pp: [640.0, 480.0],
            elev_deg: [-30.0, 50.0],
            size: [1280, 960],
        }
    }
}

impl CameraConfig {
    pub fn build(&self) -> Result<CameraModel, CameraError> {
        CameraModel::new(
            self.kind,
            self.rho.clone(),
            self.zp.clone(),
            Pixel::new(self.pp[0], self.pp[1]),
            (self.elev_deg[0].to_radians(), self.elev_deg[1].to_radians()),
            (self.size[0], self.size[1]),
        )
    }
}

/// Uncertainty bookkeeping knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncConfig {
    /// Landmarks with fewer than two usable residuals get the isotropic
    /// prior `(point_prior · median scene depth)²·I` instead.
    pub point_prior: f64,
    /// Number of most-recent residuals kept per landmark.
    pub max_history: usize,
    /// Fallback pixel noise σ when an observation does not carry its own.
    pub pixel_sigma: f64,
}

impl Default for UncConfig {
    fn default() -> Self {
        UncConfig {
            point_prior: 0.05,
            max_history: 20,
            pixel_sigma: 0.5,
        }
    }
}

/// Levenberg-Marquardt and bundle-adjustment knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaConfig {
    /// Local window size in keyframes.
    pub window: usize,
    /// Maximum outer LM iterations.
    pub max_iters: usize,
    /// Whitened χ² threshold for the robust kernel and the outlier gate
    /// (5.991 = 95% quantile of χ² with 2 DoF).
    pub huber_chi2: f64,
    /// Initial LM damping factor.
    pub lambda0: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            window: 5,
            max_iters: 20,
            huber_chi2: 5.991,
            lambda0: 1e-4,
        }
    }
}

/// Two-view bootstrap knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// RANSAC inlier threshold on the angular epipolar error, radians.
    pub ransac_thresh_rad: f64,
    /// Maximum RANSAC iterations (adaptive early exit may stop sooner).
    pub ransac_iters: usize,
    /// Minimum inlier ratio for a model to count at all.
    pub min_inlier_ratio: f64,
    /// Minimum triangulation parallax, degrees.
    pub min_parallax_deg: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            ransac_thresh_rad: 1e-3,
            ransac_iters: 500,
            min_inlier_ratio: 0.3,
            min_parallax_deg: 1.0,
        }
    }
}

/// Loop proposal / verification knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Proposal radius as a fraction of the trajectory extent.
    pub radius_frac: f64,
    /// Minimum keyframe index gap between a candidate pair.
    pub min_gap: usize,
    /// Minimum epipolar inlier ratio to accept a candidate.
    pub min_inlier_ratio: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            radius_frac: 0.1,
            min_gap: 20,
            min_inlier_ratio: 0.5,
        }
    }
}

/// Trajectory evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Timestamp association tolerance, seconds.
    pub assoc_tol_s: f64,
    /// Relative-pose-error segment length, meters of ground-truth arc.
    pub rpe_delta_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            assoc_tol_s: 0.01,
            rpe_delta_m: 1.0,
        }
    }
}

/// Pipeline toggles — the ablation arms flip the two `use_*` switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Weight tracking by propagated landmark uncertainty.
    pub use_point_unc: bool,
    /// Weight fixed-keyframe factors by propagated pose uncertainty.
    pub use_pose_unc: bool,
    /// Insert a keyframe every this many frames.
    pub kf_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            use_point_unc: true,
            use_pose_unc: true,
            kf_every: 3,
        }
    }
}

/// Synthetic-world generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub trajectory: TrajectoryConfig,
    pub n_landmarks: usize,
    pub shell: ShellConfig,
    /// Isotropic pixel noise σ added to every observation.
    pub pixel_sigma: f64,
    /// Fraction of landmarks whose observations carry world-space jitter
    /// (the heteroscedastic knob).
    pub jitter_frac: f64,
    /// World jitter σ as a fraction of the scene scale.
    pub jitter_sigma_frac: f64,
    /// Fraction of observations replaced by uniform in-FoV pixels.
    pub outlier_rate: f64,
    /// Fraction of visible observations dropped entirely.
    pub dropout_rate: f64,
    /// Frame period in seconds.
    pub dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trajectory: TrajectoryConfig::default(),
            n_landmarks: 400,
            shell: ShellConfig::default(),
            pixel_sigma: 0.5,
            jitter_frac: 0.3,
            jitter_sigma_frac: 0.02,
            outlier_rate: 0.0,
            dropout_rate: 0.0,
            dt: 0.1,
        }
    }
}

/// Landmarks live in a spherical shell around the trajectory, restricted to
/// an elevation band (as seen from the origin) so they fall inside the
/// annular FoV for most of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShellConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub elev_band_deg: [f64; 2],
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig {
            r_min: 4.0,
            r_max: 8.0,
            elev_band_deg: [-22.0, 38.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryConfig {
    /// Planar circle, heading tangent to the motion.
    Circle { radius: f64, turns: f64, n_frames: usize },
    /// Planar Lissajous figure with mild vertical bob.
    Lissajous {
        amp: [f64; 3],
        freq: [f64; 3],
        n_frames: usize,
    },
    /// Integrated random yaw/step increments.
    RandomWalk {
        step_sigma: f64,
        yaw_sigma: f64,
        n_frames: usize,
    },
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::Circle {
            radius: 2.0,
            turns: 1.0,
            n_frames: 60,
        }
    }
}

impl TrajectoryConfig {
    pub fn n_frames(&self) -> usize {
        match self {
            TrajectoryConfig::Circle { n_frames, .. }
            | TrajectoryConfig::Lissajous { n_frames, .. }
            | TrajectoryConfig::RandomWalk { n_frames, .. } => *n_frames,
        }
    }
}

/// Applies one `key.path=value` override to a JSON tree. The value is parsed
/// as JSON when possible (numbers, bools, arrays) and falls back to a plain
/// string, so `--set camera.kind=taylor` works without quoting gymnastics.
fn apply_override(tree: &mut serde_json::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(entry.to_string()))?;
    if path.is_empty() {
        return Err(ConfigError::MalformedOverride(entry.to_string()));
    }
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let object = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverridePath(path.to_string()))?;
        if i + 1 == segments.len() {
            object.insert(segment.to_string(), value);
            return Ok(());
        }
        node = object
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_defaults() {
        let config = RunConfig::from_json("{}", &[]).unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.ba.window, 5);
        assert_eq!(config.loop_closing.min_gap, 20);
        assert!((config.ba.huber_chi2 - 5.991).abs() < 1e-12);
    }

    #[test]
    fn default_config_roundtrips_through_json() {
        let dumped = RunConfig::default().to_pretty_json();
        let back = RunConfig::from_json(&dumped, &[]).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#, &[]).is_err());
        assert!(RunConfig::from_json(r#"{"ba": {"windoww": 5}}"#, &[]).is_err());
        assert!(
            RunConfig::from_json(r#"{"sim": {"trajectory": {"kind": "circle", "r": 1}}}"#, &[])
                .is_err()
        );
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let config = RunConfig::from_json(
            "{}",
            &[
                "ba.window=9".to_string(),
                "run.use_point_unc=false".to_string(),
                "camera.kind=kannala_brandt".to_string(),
                "camera.rho=[150.0]".to_string(),
                "camera.pp=[256,256]".to_string(),
                "camera.elev_deg=[0,90]".to_string(),
                "camera.size=[512,512]".to_string(),
                "seed=42".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.ba.window, 9);
        assert!(!config.run.use_point_unc);
        assert_eq!(config.camera.kind, CameraKind::KannalaBrandt);
        assert_eq!(config.seed, 42);
        config.camera.build().unwrap();
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let err = RunConfig::from_json("{}", &["ba.windoww=9".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::Json(_)));
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        assert!(matches!(
            RunConfig::from_json("{}", &["ba.window".to_string()]),
            Err(ConfigError::MalformedOverride(_))
        ));
        assert!(matches!(
            RunConfig::from_json("{}", &["=3".to_string()]),
            Err(ConfigError::MalformedOverride(_))
        ));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"ba": {"window": 0}}"#, &[]).is_err());
        assert!(RunConfig::from_json(r#"{"sim": {"dropout_rate": 1.0}}"#, &[]).is_err());
        assert!(RunConfig::from_json(r#"{"unc": {"pixel_sigma": -0.5}}"#, &[]).is_err());
    }

    #[test]
    fn camera_section_is_validated_via_the_model() {
        // Non-monotonic rho must be caught when the config is loaded.
        let err =
            RunConfig::from_json(r#"{"camera": {"rho": [300.0, 0.0, -10.0]}}"#, &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Camera(_)));
    }
}
