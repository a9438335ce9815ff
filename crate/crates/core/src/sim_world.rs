//! Deterministic synthetic worlds: trajectories, shell landmarks, wide-FoV
//! visibility (including the negative elevation half-plane), pixel noise,
//! heteroscedastic landmark jitter, outliers, dropout, and a line-oriented
//! tracks file.
//!
//! Everything is a pure function of a [`Scenario`]; the same scenario and
//! seed produce byte-identical output. Each noise category draws from its
//! own ChaCha stream, so two scenarios that differ in a single knob share
//! every other random decision — the geometry of an ablation pair is
//! identical by construction, not by luck:
//!
//! | stream | used for                        |
//! |--------|---------------------------------|
//! | 0      | random-walk trajectory          |
//! | 1      | landmark positions              |
//! | 2      | which landmarks carry jitter    |
//! | 3      | per-observation world jitter    |
//! | 4      | pixel noise                     |
//! | 5      | outlier selection + replacement |
//! | 6      | observation dropout             |

use crate::camera::{CameraError, CameraModel, Pixel};
use crate::config::{CameraConfig, RunConfig, ShellConfig, SimConfig, TrajectoryConfig};
use crate::se3::Pose;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no observation survives for frame {frame}: nothing is visible (or everything was dropped)")]
    EmptyVisibility { frame: u64 },
    #[error("camera: {0}")]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("tracks file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Everything that determines a synthetic world: world knobs, the camera
/// observing it, and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sim: SimConfig,
    pub camera: CameraConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Scenario { sim: cfg.sim.clone(), camera: cfg.camera.clone(), seed: cfg.seed }
    }

    fn validate(&self) -> Result<(), SimError> {
        let s = &self.sim;
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        for (name, rate) in [
            ("jitter_frac", s.jitter_frac),
            ("outlier_rate", s.outlier_rate),
            ("dropout_rate", s.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} = {rate} is outside [0, 1]"));
            }
        }
        if s.pixel_sigma < 0.0 || !s.pixel_sigma.is_finite() {
            return bad(format!("pixel_sigma = {} must be finite and >= 0", s.pixel_sigma));
        }
        if s.jitter_sigma_frac < 0.0 || !s.jitter_sigma_frac.is_finite() {
            return bad(format!(
                "jitter_sigma_frac = {} must be finite and >= 0",
                s.jitter_sigma_frac
            ));
        }
        if s.trajectory.n_frames() == 0 {
            return bad("trajectory needs at least one frame".to_string());
        }
        if s.n_landmarks == 0 {
            return bad("need at least one landmark".to_string());
        }
        if !(s.dt > 0.0) {
            return bad(format!("dt = {} must be positive", s.dt));
        }
        let sh = &s.shell;
        if !(sh.r_min > 0.0 && sh.r_max > sh.r_min) {
            return bad(format!("shell radii [{}, {}] must satisfy 0 < r_min < r_max", sh.r_min, sh.r_max));
        }
        if !(sh.elev_band_deg[0] < sh.elev_band_deg[1])
            || sh.elev_band_deg[0] < -90.0
            || sh.elev_band_deg[1] > 90.0
        {
            return bad(format!(
                "shell elevation band [{}, {}] must be an interval inside [-90, 90]",
                sh.elev_band_deg[0], sh.elev_band_deg[1]
            ));
        }
        Ok(())
    }
}

/// Ground-truth pose of one frame. The pose is stored camera-in-world
/// (rotation maps camera coordinates to world coordinates, translation is
/// the camera center) — the same convention as the tracks file — so the
/// file round-trips exactly; [`FrameGt::world_to_camera`] gives the
/// convention the optimizer uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGt {
    pub frame_id: u64,
    pub timestamp: f64,
    pub cam_in_world: Pose,
}

impl FrameGt {
    pub fn world_to_camera(&self) -> Pose {
        self.cam_in_world.inverse()
    }
}

/// One simulated feature measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObs {
    pub frame_id: u64,
    pub landmark_id: u64,
    pub pixel: Pixel,
    pub sigma_px: f64,
}

/// A complete simulated dataset: ground-truth poses and landmarks plus the
/// observations a front end would have produced. Frame and landmark ids
/// are dense from 0 (they index the vectors); observations are ordered by
/// frame, then landmark.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub frames: Vec<FrameGt>,
    pub landmarks: Vec<Vector3<f64>>,
    pub observations: Vec<TrackObs>,
}

impl TrackSet {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    /// Observations of one frame, in landmark order (binary search on the
    /// canonical observation ordering).
    pub fn observations_of_frame(&self, frame_id: u64) -> &[TrackObs] {
        let lo = self.observations.partition_point(|o| o.frame_id < frame_id);
        let hi = self.observations.partition_point(|o| o.frame_id <= frame_id);
        &self.observations[lo..hi]
    }

    /// Median landmark distance from the trajectory centroid — the length
    /// scale used to turn fractional noise knobs into world units.
    pub fn scene_scale(&self) -> f64 {
        if self.landmarks.is_empty() || self.frames.is_empty() {
            return 0.0;
        }
        let centroid = self
            .frames
            .iter()
            .map(|f| f.cam_in_world.translation)
            .sum::<Vector3<f64>>()
            / self.frames.len() as f64;
        let mut d: Vec<f64> = self.landmarks.iter().map(|p| (p - centroid).norm()).collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }
}

/// Smallest measurement σ ever recorded, in pixels: keeps whitening finite
/// on noise-free worlds without pretending to sub-centipixel precision.
const SIGMA_FLOOR_PX: f64 = 0.01;

fn stream(seed: u64, id: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal3(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    )
}

/// Camera-in-world pose with the optical axis on world-up and the camera
/// x-axis at `yaw` in the ground plane — the mounting for a ring FoV that
/// looks outward all around.
fn upright_pose(center: Vector3<f64>, yaw: f64) -> Pose {
    Pose::from_parts(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), center)
}

fn generate_trajectory(
    cfg: &TrajectoryConfig,
    dt: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<FrameGt> {
    let n = cfg.n_frames();
    let mut frames = Vec::with_capacity(n);
    match *cfg {
        TrajectoryConfig::Circle { radius, turns, .. } => {
            for i in 0..n {
                let phi = std::f64::consts::TAU * turns * i as f64 / n as f64;
                let center = Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0);
                // Heading tangent to the circle (counter-clockwise).
                frames.push(FrameGt {
                    frame_id: i as u64,
                    timestamp: i as f64 * dt,
                    cam_in_world: upright_pose(center, phi + std::f64::consts::FRAC_PI_2),
                });
            }
        }
        TrajectoryConfig::Lissajous { amp, freq, .. } => {
            let mut yaw_prev = 0.0;
            for i in 0..n {
                let s = i as f64 / n as f64;
                let arg = |k: usize| std::f64::consts::TAU * freq[k] * s;
                let center =
                    Vector3::new(amp[0] * arg(0).sin(), amp[1] * arg(1).sin(), amp[2] * arg(2).sin());
                // Heading from the analytic planar velocity; hold the
                // previous heading through stationary points.
                let vx = amp[0] * freq[0] * arg(0).cos();
                let vy = amp[1] * freq[1] * arg(1).cos();
                let yaw = if vx.hypot(vy) > 1e-12 { vy.atan2(vx) } else { yaw_prev };
                yaw_prev = yaw;
                frames.push(FrameGt {
                    frame_id: i as u64,
                    timestamp: i as f64 * dt,
                    cam_in_world: upright_pose(center, yaw),
                });
            }
        }
        TrajectoryConfig::RandomWalk { step_sigma, yaw_sigma, .. } => {
            let mut yaw = 0.0;
            let mut center = Vector3::zeros();
            for i in 0..n {
                if i > 0 {
                    yaw += yaw_sigma * rng.sample::<f64, _>(StandardNormal);
                    let step =
                        (step_sigma * (1.0 + 0.25 * rng.sample::<f64, _>(StandardNormal))).max(0.0);
                    center += step * Vector3::new(yaw.cos(), yaw.sin(), 0.0);
                }
                frames.push(FrameGt {
                    frame_id: i as u64,
                    timestamp: i as f64 * dt,
                    cam_in_world: upright_pose(center, yaw),
                });
            }
        }
    }
    frames
}

/// Area-uniform directions inside the elevation band, volume-uniform radii
/// inside the shell.
fn generate_landmarks(shell: &ShellConfig, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vector3<f64>> {
    let sin_lo = shell.elev_band_deg[0].to_radians().sin();
    let sin_hi = shell.elev_band_deg[1].to_radians().sin();
    let r3_lo = shell.r_min.powi(3);
    let r3_hi = shell.r_max.powi(3);
    (0..n)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let elev = rng.random_range(sin_lo..sin_hi).asin();
            let r = rng.random_range(r3_lo..r3_hi).cbrt();
            Vector3::new(
                r * elev.cos() * az.cos(),
                r * elev.cos() * az.sin(),
                r * elev.sin(),
            )
        })
        .collect()
}

/// `k` distinct indices out of `n` by partial Fisher-Yates, as a mask.
fn choose_mask(n: usize, k: usize, rng: &mut ChaCha12Rng) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Gaussian pixel noise, redrawn until the pixel stays inside the FoV so
/// every emitted measurement remains unprojectable. The fallback to the
/// exact pixel is unreachable for any point the visibility gate admitted;
/// it only bounds the loop.
fn noisy_pixel(cam: &CameraModel, exact: Pixel, sigma: f64, rng: &mut ChaCha12Rng) -> Pixel {
    for _ in 0..10_000 {
        let cand = Pixel::new(
            exact.u + sigma * rng.sample::<f64, _>(StandardNormal),
            exact.v + sigma * rng.sample::<f64, _>(StandardNormal),
        );
        if cam.contains_pixel(&cand) {
            return cand;
        }
    }
    exact
}

/// Uniform over the valid FoV region by rejection over the image
/// rectangle. The model validation guarantees the region has nonvanishing
/// area, so this terminates quickly.
fn uniform_in_fov(cam: &CameraModel, rng: &mut ChaCha12Rng) -> Pixel {
    let (w, h) = cam.image_size();
    loop {
        let px = Pixel::new(
            rng.random_range(0.0..f64::from(w)),
            rng.random_range(0.0..f64::from(h)),
        );
        if cam.contains_pixel(&px) {
            return px;
        }
    }
}

/// Builds the dataset for a scenario.
///
/// Per (frame, landmark) candidate, in canonical frame-major order: the
/// world point is displaced per observation if the landmark carries jitter
/// (each sighting is consistent with its own displaced copy — a stored map
/// position that errs differently every time it is re-observed), then the
/// noise-free reprojection gates visibility, then dropout, then either
/// outlier replacement (a uniform in-FoV pixel) or Gaussian pixel noise.
/// Jittered candidates whose displaced point leaves the FoV are dropped.
///
/// Errors with [`SimError::EmptyVisibility`] if any frame ends up with no
/// observations.
pub fn generate(scn: &Scenario) -> Result<TrackSet, SimError> {
    scn.validate()?;
    let cam = scn.camera.build()?;
    let sim = &scn.sim;

    let frames = generate_trajectory(&sim.trajectory, sim.dt, &mut stream(scn.seed, 0));
    let landmarks = generate_landmarks(&sim.shell, sim.n_landmarks, &mut stream(scn.seed, 1));

    let n_jittered = (sim.jitter_frac * sim.n_landmarks as f64).round() as usize;
    let jittered = choose_mask(sim.n_landmarks, n_jittered, &mut stream(scn.seed, 2));

    let centroid =
        frames.iter().map(|f| f.cam_in_world.translation).sum::<Vector3<f64>>() / frames.len() as f64;
    let mut dists: Vec<f64> = landmarks.iter().map(|p| (p - centroid).norm()).collect();
    dists.sort_by(f64::total_cmp);
    let sigma_world = sim.jitter_sigma_frac * dists[dists.len() / 2];

    let mut jitter_rng = stream(scn.seed, 3);
    let mut noise_rng = stream(scn.seed, 4);
    let mut outlier_rng = stream(scn.seed, 5);
    let mut dropout_rng = stream(scn.seed, 6);

    let sigma_px = sim.pixel_sigma.max(SIGMA_FLOOR_PX);
    let mut observations = Vec::new();
    for frame in &frames {
        let w2c = frame.world_to_camera();
        let mut emitted = 0usize;
        for (l, gt) in landmarks.iter().enumerate() {
            // Jitter draws are consumed for every candidate pair so the
            // stream stays aligned whatever the visibility outcome.
            let point = if jittered[l] {
                gt + sigma_world * normal3(&mut jitter_rng)
            } else {
                *gt
            };
            let Ok(exact) = cam.project(&w2c.act(&point)) else { continue };
            if !cam.contains_pixel(&exact) {
                continue;
            }
            if dropout_rng.random::<f64>() < sim.dropout_rate {
                continue;
            }
            let pixel = if outlier_rng.random::<f64>() < sim.outlier_rate {
                uniform_in_fov(&cam, &mut outlier_rng)
            } else if sim.pixel_sigma > 0.0 {
                noisy_pixel(&cam, exact, sim.pixel_sigma, &mut noise_rng)
            } else {
                exact
            };
            observations.push(TrackObs {
                frame_id: frame.frame_id,
                landmark_id: l as u64,
                pixel,
                sigma_px,
            });
            emitted += 1;
        }
        if emitted == 0 {
            return Err(SimError::EmptyVisibility { frame: frame.frame_id });
        }
    }

    Ok(TrackSet { frames, landmarks, observations })
}

// ---------------------------------------------------------------------------
// Tracks file
// ---------------------------------------------------------------------------

fn fmt_real(x: f64) -> String {
    // 17 significant digits: lossless for f64.
    format!("{x:.16e}")
}

/// Renders a [`TrackSet`] in the line-oriented tracks format:
///
/// ```text
/// KF <frame_id> <timestamp>
/// GTPOSE <frame_id> tx ty tz qx qy qz qw      # camera-in-world
/// LM <landmark_id> x y z
/// OBS <frame_id> <landmark_id> <u> <v> <sigma_px>
/// ```
///
/// `#` starts a comment; reals carry 17 significant digits, so a parse of
/// the output reproduces the input exactly.
pub fn format_tracks(ts: &TrackSet) -> String {
    let mut out = String::new();
    out.push_str("# tracks v1\n");
    for f in &ts.frames {
        let _ = writeln!(out, "KF {} {}", f.frame_id, fmt_real(f.timestamp));
        let t = f.cam_in_world.translation;
        let q = f.cam_in_world.rotation.coords;
        let _ = writeln!(
            out,
            "GTPOSE {} {} {} {} {} {} {} {}",
            f.frame_id,
            fmt_real(t.x),
            fmt_real(t.y),
            fmt_real(t.z),
            fmt_real(q.x),
            fmt_real(q.y),
            fmt_real(q.z),
            fmt_real(q.w),
        );
    }
    for (i, p) in ts.landmarks.iter().enumerate() {
        let _ = writeln!(out, "LM {i} {} {} {}", fmt_real(p.x), fmt_real(p.y), fmt_real(p.z));
    }
    for o in &ts.observations {
        let _ = writeln!(
            out,
            "OBS {} {} {} {} {}",
            o.frame_id,
            o.landmark_id,
            fmt_real(o.pixel.u),
            fmt_real(o.pixel.v),
            fmt_real(o.sigma_px),
        );
    }
    out
}

pub fn write_tracks(path: &Path, ts: &TrackSet) -> Result<(), SimError> {
    std::fs::write(path, format_tracks(ts))?;
    Ok(())
}

fn parse_real(tok: &str, line: usize) -> Result<f64, SimError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| SimError::Parse { line, msg: format!("bad real `{tok}`") })?;
    if !v.is_finite() {
        return Err(SimError::Parse { line, msg: format!("non-finite real `{tok}`") });
    }
    Ok(v)
}

fn parse_id(tok: &str, line: usize) -> Result<u64, SimError> {
    tok.parse()
        .map_err(|_| SimError::Parse { line, msg: format!("bad id `{tok}`") })
}

fn expect_args(toks: &[&str], n: usize, line: usize, what: &str) -> Result<(), SimError> {
    if toks.len() != n {
        return Err(SimError::Parse {
            line,
            msg: format!("{what} takes {n} fields, got {}", toks.len()),
        });
    }
    Ok(())
}

/// Parses the tracks format; see [`format_tracks`]. Frame and landmark ids
/// must arrive dense from 0, every frame must get exactly one GTPOSE, and
/// observations may only reference records already declared.
pub fn parse_tracks(text: &str) -> Result<TrackSet, SimError> {
    let mut ts = TrackSet::default();
    let mut pose_seen: Vec<bool> = Vec::new();
    let mut n_lines = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        n_lines = line;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        match toks[0] {
            "KF" => {
                expect_args(&toks, 3, line, "KF")?;
                let id = parse_id(toks[1], line)?;
                if id != ts.frames.len() as u64 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("frame ids must be dense from 0; expected {}, got {id}", ts.frames.len()),
                    });
                }
                ts.frames.push(FrameGt {
                    frame_id: id,
                    timestamp: parse_real(toks[2], line)?,
                    cam_in_world: Pose::identity(),
                });
                pose_seen.push(false);
            }
            "GTPOSE" => {
                expect_args(&toks, 9, line, "GTPOSE")?;
                let id = parse_id(toks[1], line)?;
                let slot = ts
                    .frames
                    .iter()
                    .position(|f| f.frame_id == id)
                    .ok_or_else(|| SimError::Parse {
                        line,
                        msg: format!("GTPOSE for undeclared frame {id}"),
                    })?;
                if pose_seen[slot] {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("duplicate GTPOSE for frame {id}"),
                    });
                }
                let mut v = [0.0f64; 7];
                for (k, slot_v) in v.iter_mut().enumerate() {
                    *slot_v = parse_real(toks[2 + k], line)?;
                }
                let q = Quaternion::new(v[6], v[3], v[4], v[5]);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("quaternion norm {} is not 1", q.norm()),
                    });
                }
                // new_unchecked keeps the stored coordinates bit-exact;
                // renormalizing would break round-trip identity.
                ts.frames[slot].cam_in_world =
                    Pose::from_parts(UnitQuaternion::new_unchecked(q), Vector3::new(v[0], v[1], v[2]));
                pose_seen[slot] = true;
            }
            "LM" => {
                expect_args(&toks, 5, line, "LM")?;
                let id = parse_id(toks[1], line)?;
                if id != ts.landmarks.len() as u64 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!(
                            "landmark ids must be dense from 0; expected {}, got {id}",
                            ts.landmarks.len()
                        ),
                    });
                }
                ts.landmarks.push(Vector3::new(
                    parse_real(toks[2], line)?,
                    parse_real(toks[3], line)?,
                    parse_real(toks[4], line)?,
                ));
            }
            "OBS" => {
                expect_args(&toks, 6, line, "OBS")?;
                let frame_id = parse_id(toks[1], line)?;
                let landmark_id = parse_id(toks[2], line)?;
                if frame_id >= ts.frames.len() as u64 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("observation references undeclared frame {frame_id}"),
                    });
                }
                if landmark_id >= ts.landmarks.len() as u64 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("observation references undeclared landmark {landmark_id}"),
                    });
                }
                let u = parse_real(toks[3], line)?;
                let v = parse_real(toks[4], line)?;
                let sigma_px = parse_real(toks[5], line)?;
                if sigma_px <= 0.0 {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("sigma_px = {sigma_px} must be positive"),
                    });
                }
                ts.observations.push(TrackObs {
                    frame_id,
                    landmark_id,
                    pixel: Pixel::new(u, v),
                    sigma_px,
                });
            }
            other => {
                return Err(SimError::Parse { line, msg: format!("unknown record `{other}`") });
            }
        }
    }

    if let Some(slot) = pose_seen.iter().position(|seen| !seen) {
        return Err(SimError::Parse {
            line: n_lines,
            msg: format!("frame {} has no GTPOSE", ts.frames[slot].frame_id),
        });
    }
    Ok(ts)
}

pub fn read_tracks(path: &Path) -> Result<TrackSet, SimError> {
    parse_tracks(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clean_scenario() -> Scenario {
        let mut cfg = RunConfig::default();
        cfg.sim.pixel_sigma = 0.0;
        cfg.sim.jitter_frac = 0.0;
        cfg.sim.outlier_rate = 0.0;
        cfg.sim.dropout_rate = 0.0;
        cfg.sim.n_landmarks = 150;
        cfg.sim.trajectory = TrajectoryConfig::Circle { radius: 2.0, turns: 1.0, n_frames: 24 };
        Scenario::from_run_config(&cfg)
    }

    #[test]
    fn default_scenario_generates_valid_observations() {
        let scn = Scenario::from_run_config(&RunConfig::default());
        let cam = scn.camera.build().unwrap();
        let ts = generate(&scn).unwrap();

        assert_eq!(ts.n_frames(), scn.sim.trajectory.n_frames());
        assert_eq!(ts.n_landmarks(), scn.sim.n_landmarks);
        assert!(!ts.observations.is_empty());
        for (i, f) in ts.frames.iter().enumerate() {
            assert_eq!(f.frame_id, i as u64);
            assert_eq!(f.timestamp, i as f64 * scn.sim.dt);
        }
        let mut prev = (0u64, 0u64);
        for (i, o) in ts.observations.iter().enumerate() {
            assert!((o.frame_id as usize) < ts.n_frames());
            assert!((o.landmark_id as usize) < ts.n_landmarks());
            assert!(cam.contains_pixel(&o.pixel), "observation {i} is out of FoV");
            assert!(o.sigma_px > 0.0);
            // Canonical ordering: frame-major, landmark ascending.
            assert!((o.frame_id, o.landmark_id) > prev || i == 0);
            prev = (o.frame_id, o.landmark_id);
        }
        // Every frame kept some observations.
        for f in &ts.frames {
            assert!(!ts.observations_of_frame(f.frame_id).is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let scn = Scenario::from_run_config(&RunConfig::default());
        let a = generate(&scn).unwrap();
        let b = generate(&scn).unwrap();
        assert_eq!(a, b);
        assert_eq!(format_tracks(&a), format_tracks(&b));

        let mut other = scn.clone();
        other.seed = 1;
        let c = generate(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_observations_reproject_exactly() {
        let scn = clean_scenario();
        let cam = scn.camera.build().unwrap();
        let ts = generate(&scn).unwrap();
        for o in &ts.observations {
            let w2c = ts.frames[o.frame_id as usize].world_to_camera();
            let exact = cam.project(&w2c.act(&ts.landmarks[o.landmark_id as usize])).unwrap();
            assert_eq!(o.pixel.u, exact.u);
            assert_eq!(o.pixel.v, exact.v);
        }
    }

    #[test]
    fn observations_match_a_brute_force_visibility_oracle() {
        let scn = clean_scenario();
        let cam = scn.camera.build().unwrap();
        let ts = generate(&scn).unwrap();

        let emitted: std::collections::BTreeSet<(u64, u64)> =
            ts.observations.iter().map(|o| (o.frame_id, o.landmark_id)).collect();
        assert_eq!(emitted.len(), ts.observations.len(), "duplicate observations");

        let mut expected = std::collections::BTreeSet::new();
        for f in &ts.frames {
            let w2c = f.world_to_camera();
            for (l, p) in ts.landmarks.iter().enumerate() {
                if let Ok(px) = cam.project(&w2c.act(p)) {
                    if cam.contains_pixel(&px) {
                        expected.insert((f.frame_id, l as u64));
                    }
                }
            }
        }
        assert_eq!(emitted, expected);
    }

    #[test]
    fn annular_fov_sees_the_negative_half_plane() {
        // The default camera tilts 30° below its equator; the default
        // shell extends below it too. The dataset should actually use
        // that: some observed landmarks must sit below some observing
        // camera (negative z in camera coordinates).
        let scn = clean_scenario();
        let ts = generate(&scn).unwrap();
        let below = ts
            .observations
            .iter()
            .filter(|o| {
                let w2c = ts.frames[o.frame_id as usize].world_to_camera();
                w2c.act(&ts.landmarks[o.landmark_id as usize]).z < 0.0
            })
            .count();
        assert!(
            below > ts.observations.len() / 20,
            "only {below} of {} observations look below the equator",
            ts.observations.len()
        );
    }

    #[test]
    fn outliers_change_only_struck_pixels() {
        let clean = generate(&clean_scenario()).unwrap();
        let mut scn = clean_scenario();
        scn.sim.outlier_rate = 0.3;
        let dirty = generate(&scn).unwrap();

        // Separate streams: geometry and the emitted set are untouched.
        assert_eq!(clean.frames, dirty.frames);
        assert_eq!(clean.landmarks, dirty.landmarks);
        assert_eq!(clean.observations.len(), dirty.observations.len());

        let cam = scn.camera.build().unwrap();
        let mut struck = 0usize;
        for (a, b) in clean.observations.iter().zip(&dirty.observations) {
            assert_eq!((a.frame_id, a.landmark_id), (b.frame_id, b.landmark_id));
            if a.pixel != b.pixel {
                struck += 1;
                assert!(cam.contains_pixel(&b.pixel));
            }
        }
        let rate = struck as f64 / clean.observations.len() as f64;
        assert!((0.2..0.4).contains(&rate), "outlier strike rate {rate:.3}");
    }

    #[test]
    fn dropout_removes_a_fraction_of_the_clean_set() {
        let clean = generate(&clean_scenario()).unwrap();
        let mut scn = clean_scenario();
        scn.sim.dropout_rate = 0.3;
        let dropped = generate(&scn).unwrap();

        let clean_set: std::collections::BTreeSet<(u64, u64)> =
            clean.observations.iter().map(|o| (o.frame_id, o.landmark_id)).collect();
        for o in &dropped.observations {
            assert!(clean_set.contains(&(o.frame_id, o.landmark_id)));
        }
        let kept = dropped.observations.len() as f64 / clean.observations.len() as f64;
        assert!((0.6..0.8).contains(&kept), "kept fraction {kept:.3}");
    }

    #[test]
    fn jitter_marks_the_configured_fraction_and_breaks_track_consistency() {
        let clean = generate(&clean_scenario()).unwrap();
        let mut scn = clean_scenario();
        scn.sim.jitter_frac = 0.5;
        scn.sim.jitter_sigma_frac = 0.02;
        let jittered = generate(&scn).unwrap();

        assert_eq!(clean.frames, jittered.frames);
        assert_eq!(clean.landmarks, jittered.landmarks);

        // A landmark is affected iff any of its observations moved (or
        // vanished off-FoV). Collate per landmark.
        let by_lm = |ts: &TrackSet| -> std::collections::BTreeMap<u64, Vec<TrackObs>> {
            let mut m: std::collections::BTreeMap<u64, Vec<TrackObs>> =
                std::collections::BTreeMap::new();
            for o in &ts.observations {
                m.entry(o.landmark_id).or_default().push(*o);
            }
            m
        };
        let clean_by = by_lm(&clean);
        let dirty_by = by_lm(&jittered);
        let mut affected = 0usize;
        let mut max_shift: f64 = 0.0;
        for l in 0..clean.n_landmarks() as u64 {
            let a = clean_by.get(&l).cloned().unwrap_or_default();
            let b = dirty_by.get(&l).cloned().unwrap_or_default();
            if a != b {
                affected += 1;
                for (oa, ob) in a.iter().zip(&b) {
                    max_shift = max_shift.max(oa.pixel.distance(&ob.pixel));
                }
            }
        }
        // Exactly round(frac·n) landmarks were marked, and with σ_world at
        // 2% of a ~6 m scene every marked one that is observed moves.
        let marked = (0.5 * clean.n_landmarks() as f64).round() as usize;
        assert!(
            affected >= marked * 9 / 10 && affected <= marked,
            "affected {affected} of {marked} marked"
        );
        assert!(max_shift > 1.0, "jitter too small to matter: {max_shift:.3} px");
    }

    #[test]
    fn empty_visibility_is_reported() {
        let mut scn = clean_scenario();
        // Everything far below the camera's lowest elevation.
        scn.sim.shell = ShellConfig { r_min: 6.0, r_max: 8.0, elev_band_deg: [-85.0, -75.0] };
        match generate(&scn) {
            Err(SimError::EmptyVisibility { frame: 0 }) => {}
            other => panic!("expected EmptyVisibility at frame 0, got {other:?}"),
        }
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let who = |mut f: Box<dyn FnMut(&mut Scenario)>| {
            let mut scn = clean_scenario();
            f(&mut scn);
            match generate(&scn) {
                Err(SimError::InvalidScenario(_)) => {}
                other => panic!("expected InvalidScenario, got {other:?}"),
            }
        };
        who(Box::new(|s| s.sim.outlier_rate = 1.5));
        who(Box::new(|s| s.sim.dropout_rate = -0.1));
        who(Box::new(|s| s.sim.jitter_frac = f64::NAN));
        who(Box::new(|s| s.sim.pixel_sigma = -1.0));
        who(Box::new(|s| s.sim.n_landmarks = 0));
        who(Box::new(|s| s.sim.dt = 0.0));
        who(Box::new(|s| s.sim.shell.r_min = 0.0));
        who(Box::new(|s| s.sim.shell.elev_band_deg = [30.0, 30.0]));
        who(Box::new(|s| {
            s.sim.trajectory = TrajectoryConfig::Circle { radius: 2.0, turns: 1.0, n_frames: 0 }
        }));
    }

    #[test]
    fn scene_scale_is_the_median_distance_from_the_trajectory_centroid() {
        let ts = TrackSet {
            frames: vec![
                FrameGt { frame_id: 0, timestamp: 0.0, cam_in_world: Pose::identity() },
                FrameGt {
                    frame_id: 1,
                    timestamp: 0.1,
                    cam_in_world: Pose::from_parts(
                        UnitQuaternion::identity(),
                        Vector3::new(2.0, 0.0, 0.0),
                    ),
                },
            ],
            landmarks: vec![
                Vector3::new(2.0, 0.0, 0.0), // distance 1 from centroid (1,0,0)
                Vector3::new(1.0, 2.0, 0.0), // distance 2
                Vector3::new(1.0, 0.0, 9.0), // distance 9
            ],
            observations: vec![],
        };
        assert_eq!(ts.scene_scale(), 2.0);
        assert_eq!(TrackSet::default().scene_scale(), 0.0);

        let generated = generate(&clean_scenario()).unwrap();
        let s = generated.scene_scale();
        assert!((4.0..8.0).contains(&s), "shell scenario scale {s}");
    }

    // ----- tracks file ----------------------------------------------------

    #[test]
    fn tracks_file_round_trips_exactly() {
        let ts = generate(&Scenario::from_run_config(&RunConfig::default())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        write_tracks(&path, &ts).unwrap();
        let back = read_tracks(&path).unwrap();
        assert_eq!(ts, back);
        // Rendering is canonical: a second pass produces identical bytes.
        assert_eq!(format_tracks(&ts), format_tracks(&back));
    }

    #[test]
    fn empty_track_set_renders_as_header_only() {
        let text = format_tracks(&TrackSet::default());
        assert_eq!(text, "# tracks v1\n");
        assert_eq!(parse_tracks(&text).unwrap(), TrackSet::default());
        assert_eq!(parse_tracks("").unwrap(), TrackSet::default());
    }

    #[test]
    fn hand_written_file_parses_to_the_expected_structure() {
        let text = "\
# a hand-authored fixture
KF 0 0.0        # first frame
GTPOSE 0 1.0 2.0 3.0 0.0 0.0 0.0 1.0

KF 1 0.5
GTPOSE 1 0.0 0.0 0.0 0.0 0.0 1.0 0.0
LM 0 4.0 5.0 6.0
OBS 0 0 100.5 200.25 0.5
OBS 1 0 110.0 190.0 1.5
";
        let ts = parse_tracks(text).unwrap();
        assert_eq!(ts.n_frames(), 2);
        assert_eq!(ts.n_landmarks(), 1);
        assert_eq!(ts.observations.len(), 2);
        assert_eq!(ts.frames[0].timestamp, 0.0);
        assert_eq!(ts.frames[0].cam_in_world.translation, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(ts.frames[0].cam_in_world.rotation, UnitQuaternion::identity());
        assert_eq!(ts.frames[1].timestamp, 0.5);
        // (0,0,1,0) is a half-turn about z.
        let w2c = ts.frames[1].world_to_camera();
        let p = w2c.act(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(ts.landmarks[0], Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(ts.observations[1].pixel, Pixel::new(110.0, 190.0));
        assert_eq!(ts.observations[1].sigma_px, 1.5);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases: [(&str, usize, &str); 9] = [
            ("KF 0 0.0\nGTPOSE 0 0 0 0 0 0 0 1\nOBS 0 0 1 2 0.5", 3, "undeclared landmark"),
            ("KF 1 0.0", 1, "dense from 0"),
            ("LM 0 1 2 3\nLM 2 1 2 3", 2, "dense from 0"),
            ("GTPOSE 0 0 0 0 0 0 0 1", 1, "undeclared frame"),
            ("KF 0 0.0", 1, "no GTPOSE"),
            ("KF 0 0.0\nGTPOSE 0 0 0 0 0 0 0 1\nGTPOSE 0 0 0 0 0 0 0 1", 3, "duplicate"),
            ("WAT 1 2", 1, "unknown record"),
            ("LM 0 1 nope 3", 1, "bad real"),
            ("LM 0 1 inf 3", 1, "non-finite"),
        ];
        for (text, line, needle) in cases {
            match parse_tracks(text) {
                Err(SimError::Parse { line: l, msg }) => {
                    assert_eq!(l, line, "wrong line for {text:?}: {msg}");
                    assert!(msg.contains(needle), "message {msg:?} lacks {needle:?}");
                }
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
        // Wrong field counts and non-unit quaternions are rejected too.
        assert!(parse_tracks("KF 0").is_err());
        assert!(parse_tracks("KF 0 0.0\nGTPOSE 0 0 0 0 0 0 0 2").is_err());
        assert!(parse_tracks("KF 0 0.0\nGTPOSE 0 0 0 0 0 0 0 1\nLM 0 1 2 3\nOBS 0 0 1 2 0.0").is_err());
        assert!(parse_tracks("OBS 0 0 1 2 0.5").is_err());
    }

    prop_compose! {
        fn arb_frame(id: u64)(
            ts in -1.0e3..1.0e3f64,
            tx in -1.0e4..1.0e4f64,
            ty in -1.0e4..1.0e4f64,
            tz in -1.0e4..1.0e4f64,
            qx in -1.0..1.0f64,
            qy in -1.0..1.0f64,
            qz in -1.0..1.0f64,
            qw in 0.5..1.0f64,
        ) -> FrameGt {
            FrameGt {
                frame_id: id,
                timestamp: ts,
                cam_in_world: Pose::from_parts(
                    UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
                    Vector3::new(tx, ty, tz),
                ),
            }
        }
    }

    fn arb_track_set() -> impl Strategy<Value = TrackSet> {
        (1usize..5, 1usize..7).prop_flat_map(|(nf, nl)| {
            let frames: Vec<_> = (0..nf as u64).map(arb_frame).collect();
            let landmarks = proptest::collection::vec(
                (-1.0e4..1.0e4f64, -1.0e4..1.0e4f64, -1.0e4..1.0e4f64)
                    .prop_map(|(x, y, z)| Vector3::new(x, y, z)),
                nl,
            );
            let obs = proptest::collection::vec(
                (
                    0..nf as u64,
                    0..nl as u64,
                    -5.0e3..5.0e3f64,
                    -5.0e3..5.0e3f64,
                    1.0e-3..10.0f64,
                )
                    .prop_map(|(f, l, u, v, s)| TrackObs {
                        frame_id: f,
                        landmark_id: l,
                        pixel: Pixel::new(u, v),
                        sigma_px: s,
                    }),
                0..12,
            );
            (frames, landmarks, obs).prop_map(|(frames, landmarks, observations)| TrackSet {
                frames,
                landmarks,
                observations,
            })
        })
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(ts in arb_track_set()) {
            let back = parse_tracks(&format_tracks(&ts)).unwrap();
            prop_assert_eq!(ts, back);
        }
    }
}
