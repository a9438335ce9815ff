//! End-to-end monocular run over a track file: two-view bootstrap on the
//! first adequate frame pair, per-frame pose tracking, periodic keyframe
//! promotion with landmark triangulation and local bundle adjustment, and
//! loop-closure correction.
//!
//! The run consumes only what a front end would provide — timestamps and
//! pixel tracks — never the ground-truth poses a simulated track set also
//! carries; those exist for evaluation. Everything is single-threaded and
//! seeded, so a (config, tracks) pair maps to exactly one output.

use annulus_core::camera::{angle_between, CameraError, CameraModel, Pixel};
use annulus_core::config::RunConfig;
use annulus_core::init_sfm::{
    initialize_map, triangulate_midpoint, InitError, InitFrame, InitMatch,
};
use annulus_core::loop_correction::{
    close_loop, propose_candidates, verify_candidate, LoopError, MIN_LOOP_MATCHES,
};
use annulus_core::map::{Keyframe, KeyframeId, Landmark, MapState, Observation};
use annulus_core::se3::Pose;
use annulus_core::sim_world::{TrackObs, TrackSet};
use annulus_core::solver::{solve_local_ba, solve_tracking, SolveError, SolveReport, TrackMatch};
use annulus_core::traj_eval::{EvalError, Trajectory};
use annulus_core::uncertainty::{
    pose_covariance_from_solve, refresh_all_uncertainties, PoseUncertainty,
};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("camera: {0}")]
    Camera(#[from] CameraError),
    #[error("track set has no frames")]
    EmptyTracks,
    #[error("initialization failed on every frame pair; last error: {0}")]
    Init(InitError),
    #[error("tracking failed at frame {frame}: {source}")]
    Tracking { frame: u64, source: SolveError },
    #[error("local bundle adjustment failed at keyframe {kf}: {source}")]
    LocalBa { kf: KeyframeId, source: SolveError },
    #[error("loop closure {current}→{candidate} failed: {source}")]
    Loop { current: KeyframeId, candidate: KeyframeId, source: LoopError },
    #[error("trajectory assembly: {0}")]
    Trajectory(#[from] EvalError),
}

/// One optimizer invocation in the run's cost history.
#[derive(Debug, Clone, Serialize)]
pub struct SolveEntry {
    /// `"tracking"`, `"local_ba"` or `"loop_global_ba"`.
    pub stage: &'static str,
    pub frame_id: u64,
    pub iterations: usize,
    pub chi2_initial: f64,
    pub chi2_final: f64,
    pub n_inliers: usize,
    pub n_outliers: usize,
}

impl SolveEntry {
    fn new(stage: &'static str, frame_id: u64, r: &SolveReport) -> Self {
        SolveEntry {
            stage,
            frame_id,
            iterations: r.iterations,
            chi2_initial: r.chi2_initial,
            chi2_final: r.chi2_final,
            n_inliers: r.n_inliers,
            n_outliers: r.n_outliers,
        }
    }
}

/// One loop-closure attempt (verified or not).
#[derive(Debug, Clone, Serialize)]
pub struct LoopEntry {
    pub current_kf: KeyframeId,
    pub candidate_kf: KeyframeId,
    pub n_matches: usize,
    pub accepted: bool,
}

/// Machine-readable run record; serialized into the report JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub n_frames: usize,
    pub n_keyframes: usize,
    pub n_landmarks: usize,
    pub n_observations: usize,
    pub init_frame_a: u64,
    pub init_frame_b: u64,
    pub n_tracked_frames: usize,
    pub loops_closed: usize,
    pub solves: Vec<SolveEntry>,
    pub loops: Vec<LoopEntry>,
}

pub struct PipelineOutput {
    pub map: MapState,
    /// Camera-in-world estimate for every input frame: keyframes from their
    /// final optimized pose, other frames re-anchored to their reference
    /// keyframe so late corrections reach them too.
    pub trajectory: Trajectory,
    pub summary: RunSummary,
}

/// The ground-truth trajectory a simulated track set carries (evaluation
/// side; the pipeline itself never reads it).
pub fn ground_truth_trajectory(tracks: &TrackSet) -> Result<Trajectory, EvalError> {
    Trajectory::new(tracks.frames.iter().map(|f| (f.timestamp, f.cam_in_world)).collect())
}

/// A tracked frame's pose expressed relative to a keyframe:
/// `T_frame = rel ∘ T_ref`, so the export follows the keyframe when bundle
/// adjustment or a loop closure moves it afterwards.
struct FrameRef {
    ref_kf: KeyframeId,
    rel: Pose,
}

/// First keyframe sighting of a not-yet-triangulated track.
struct Pending {
    kf: KeyframeId,
    pixel: Pixel,
    sigma_px: f64,
}

pub fn run_pipeline(tracks: &TrackSet, cfg: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    let camera = cfg.camera.build()?;
    if tracks.n_frames() == 0 {
        return Err(PipelineError::EmptyTracks);
    }
    let mut solves: Vec<SolveEntry> = Vec::new();
    let mut loops: Vec<LoopEntry> = Vec::new();

    let (init_b, mut map) = bootstrap(tracks, cfg, &camera)?;
    refresh_all_uncertainties(&mut map, &camera, &cfg.unc);

    let mut frame_refs: BTreeMap<u64, FrameRef> = BTreeMap::new();
    let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
    // Bootstrap leftovers (tracks the two-view stage could not place) get a
    // second chance against later keyframes.
    for (kf_id, frame_id) in [(0u64, 0u64), (1u64, init_b)] {
        for o in tracks.observations_of_frame(frame_id) {
            if map.landmark(o.landmark_id).is_none() && !pending.contains_key(&o.landmark_id) {
                pending.insert(
                    o.landmark_id,
                    Pending { kf: kf_id, pixel: o.pixel, sigma_px: o.sigma_px },
                );
            }
        }
    }

    let mut next_kf: KeyframeId = 2;
    let mut last_kf: KeyframeId = 0;
    let mut last_pose = map.keyframe(0).unwrap().pose;
    let mut n_tracked = 0usize;
    let mut loops_closed = 0usize;

    for f in &tracks.frames {
        if f.frame_id == 0 {
            frame_refs.insert(0, FrameRef { ref_kf: 0, rel: Pose::identity() });
            continue;
        }
        if f.frame_id == init_b {
            frame_refs.insert(init_b, FrameRef { ref_kf: 1, rel: Pose::identity() });
            last_kf = 1;
            last_pose = map.keyframe(1).unwrap().pose;
            continue;
        }

        let obs = tracks.observations_of_frame(f.frame_id);
        let matches: Vec<TrackMatch> = obs
            .iter()
            .filter(|o| map.landmark(o.landmark_id).is_some())
            .map(|o| TrackMatch { lm: o.landmark_id, pixel: o.pixel, sigma_px: o.sigma_px })
            .collect();
        let tracked = solve_tracking(
            &camera,
            &map,
            &last_pose,
            &matches,
            &cfg.ba,
            cfg.unc.pixel_sigma,
            cfg.run.use_point_unc,
        )
        .map_err(|source| PipelineError::Tracking { frame: f.frame_id, source })?;
        solves.push(SolveEntry::new("tracking", f.frame_id, &tracked.report));
        n_tracked += 1;
        last_pose = tracked.pose;

        let promote = f.frame_id > init_b
            && (f.frame_id - init_b) % (cfg.run.kf_every.max(1) as u64) == 0;
        if !promote {
            let ref_pose = map.keyframe(last_kf).unwrap().pose;
            frame_refs.insert(
                f.frame_id,
                FrameRef { ref_kf: last_kf, rel: tracked.pose.compose(&ref_pose.inverse()) },
            );
            continue;
        }

        // ----- keyframe promotion ---------------------------------------
        let kf_id = next_kf;
        next_kf += 1;
        let mut kf = Keyframe::new(kf_id, f.frame_id, f.timestamp, tracked.pose);
        kf.hessian = Some(tracked.hessian);
        kf.uncertainty = PoseUncertainty { sigma: pose_covariance_from_solve(&tracked.hessian) };
        map.insert_keyframe(kf);
        last_kf = kf_id;
        frame_refs.insert(f.frame_id, FrameRef { ref_kf: kf_id, rel: Pose::identity() });

        for o in obs {
            if map.landmark(o.landmark_id).is_some() {
                map.insert_observation(
                    kf_id,
                    o.landmark_id,
                    Observation { pixel: o.pixel, sigma_px: o.sigma_px },
                );
            } else {
                try_spawn_landmark(&mut map, &camera, cfg, &mut pending, kf_id, o);
            }
        }

        let all: Vec<KeyframeId> = map.keyframe_ids().collect();
        let (fixed, free) = all.split_at(all.len().saturating_sub(cfg.ba.window));
        let report = solve_local_ba(
            &mut map,
            &camera,
            free,
            fixed,
            &cfg.ba,
            &cfg.unc,
            cfg.run.use_point_unc,
            cfg.run.use_pose_unc,
        )
        .map_err(|source| PipelineError::LocalBa { kf: kf_id, source })?;
        solves.push(SolveEntry::new("local_ba", f.frame_id, &report));
        refresh_all_uncertainties(&mut map, &camera, &cfg.unc);

        // ----- loop closing (first verified candidate wins) --------------
        for mut c in propose_candidates(&map, kf_id, &cfg.loop_closing) {
            if c.matches.len() < MIN_LOOP_MATCHES {
                continue;
            }
            let verified = match verify_candidate(&map, &mut c, &camera, cfg) {
                Ok(v) => v,
                // Shared observations that fail to unproject are an
                // ordinary dead end for this candidate, not a run failure.
                Err(LoopError::TooFewMatches { .. }) => false,
                Err(source) => {
                    return Err(PipelineError::Loop {
                        current: kf_id,
                        candidate: c.candidate_kf,
                        source,
                    })
                }
            };
            loops.push(LoopEntry {
                current_kf: kf_id,
                candidate_kf: c.candidate_kf,
                n_matches: c.matches.len(),
                accepted: verified,
            });
            if !verified {
                continue;
            }
            let report = close_loop(&mut map, &c, &camera, cfg).map_err(|source| {
                PipelineError::Loop { current: kf_id, candidate: c.candidate_kf, source }
            })?;
            solves.push(SolveEntry::new("loop_global_ba", f.frame_id, &report));
            loops_closed += 1;
            break;
        }
        last_pose = map.keyframe(kf_id).unwrap().pose;
    }

    // Final motion-only refinement: a non-keyframe pose was solved against
    // whatever the map looked like when its frame arrived and then carried
    // along as a relative transform off its reference keyframe. Re-solving
    // it against the converged structure (and the mature landmark
    // uncertainties) gives every exported frame the benefit of the whole
    // run. Keyframes keep their bundle-adjusted poses, which are strictly
    // better informed than a motion-only solve.
    for f in &tracks.frames {
        let fr = frame_refs.get_mut(&f.frame_id).unwrap();
        let ref_kf = map.keyframe(fr.ref_kf).unwrap();
        if ref_kf.frame_id == f.frame_id {
            continue;
        }
        let matches: Vec<TrackMatch> = tracks
            .observations_of_frame(f.frame_id)
            .iter()
            .filter(|o| map.landmark(o.landmark_id).is_some())
            .map(|o| TrackMatch { lm: o.landmark_id, pixel: o.pixel, sigma_px: o.sigma_px })
            .collect();
        let initial = fr.rel.compose(&ref_kf.pose);
        match solve_tracking(
            &camera,
            &map,
            &initial,
            &matches,
            &cfg.ba,
            cfg.unc.pixel_sigma,
            cfg.run.use_point_unc,
        ) {
            Ok(refined) => {
                solves.push(SolveEntry::new("refine", f.frame_id, &refined.report));
                fr.rel = refined.pose.compose(&ref_kf.pose.inverse());
            }
            // Refinement is best effort: a frame that cannot be re-solved
            // keeps its transported pose.
            Err(e) => log::warn!("refine skipped frame {}: {e}", f.frame_id),
        }
    }

    let mut samples: Vec<(f64, Pose)> = Vec::with_capacity(tracks.n_frames());
    for f in &tracks.frames {
        let fr = &frame_refs[&f.frame_id];
        let t_frame = fr.rel.compose(&map.keyframe(fr.ref_kf).unwrap().pose);
        samples.push((f.timestamp, t_frame.inverse()));
    }
    let trajectory = Trajectory::new(samples)?;

    let summary = RunSummary {
        n_frames: tracks.n_frames(),
        n_keyframes: map.n_keyframes(),
        n_landmarks: map.n_landmarks(),
        n_observations: map.n_observations(),
        init_frame_a: 0,
        init_frame_b: init_b,
        n_tracked_frames: n_tracked,
        loops_closed,
        solves,
        loops,
    };
    Ok(PipelineOutput { map, trajectory, summary })
}

/// Two-view bootstrap: pairs frame 0 with each later frame in order and
/// returns the first pair the initializer accepts (enough shared tracks,
/// a usable essential model, sufficient parallax).
fn bootstrap(
    tracks: &TrackSet,
    cfg: &RunConfig,
    camera: &CameraModel,
) -> Result<(u64, MapState), PipelineError> {
    let first = &tracks.frames[0];
    let by_track: BTreeMap<u64, &TrackObs> = tracks
        .observations_of_frame(first.frame_id)
        .iter()
        .map(|o| (o.landmark_id, o))
        .collect();

    let mut last_err = InitError::TooFewMatches { got: 0, need: 8 };
    for fb in &tracks.frames[1..] {
        let matches: Vec<InitMatch> = tracks
            .observations_of_frame(fb.frame_id)
            .iter()
            .filter_map(|o| {
                by_track.get(&o.landmark_id).map(|a| InitMatch {
                    track: o.landmark_id,
                    pixel_a: a.pixel,
                    pixel_b: o.pixel,
                    // A pair is only as well-characterized as its vaguer
                    // half; 0 = unknown wins.
                    sigma_px: if a.sigma_px > 0.0 && o.sigma_px > 0.0 {
                        0.5 * (a.sigma_px + o.sigma_px)
                    } else {
                        0.0
                    },
                })
            })
            .collect();
        let frame_a = InitFrame { frame_id: first.frame_id, timestamp: first.timestamp };
        let frame_b = InitFrame { frame_id: fb.frame_id, timestamp: fb.timestamp };
        match initialize_map(frame_a, frame_b, &matches, camera, cfg) {
            Ok(map) => return Ok((fb.frame_id, map)),
            Err(e) => last_err = e,
        }
    }
    Err(PipelineError::Init(last_err))
}

/// Second sighting of an unmapped track from a different keyframe:
/// triangulate and insert if the pair passes the positive-depth and
/// parallax gates; first sightings are parked until then.
fn try_spawn_landmark(
    map: &mut MapState,
    camera: &CameraModel,
    cfg: &RunConfig,
    pending: &mut BTreeMap<u64, Pending>,
    kf_id: KeyframeId,
    o: &TrackObs,
) {
    let Some(p) = pending.get(&o.landmark_id) else {
        pending.insert(
            o.landmark_id,
            Pending { kf: kf_id, pixel: o.pixel, sigma_px: o.sigma_px },
        );
        return;
    };
    if p.kf == kf_id {
        return;
    }
    let (Ok(b_a), Ok(b_b)) = (camera.unproject(&p.pixel), camera.unproject(&o.pixel)) else {
        return;
    };
    let t_a = map.keyframe(p.kf).unwrap().pose;
    let t_b = map.keyframe(kf_id).unwrap().pose;
    let Ok((point, s, t)) = triangulate_midpoint(&t_a, &t_b, &b_a, &b_b) else {
        return;
    };
    if s <= 0.0 || t <= 0.0 {
        return;
    }
    let ray_a = t_a.rotation.inverse() * b_a;
    let ray_b = t_b.rotation.inverse() * b_b;
    if angle_between(&ray_a, &ray_b) < cfg.init.min_parallax_deg.to_radians() {
        // Keep the earliest sighting parked: a longer baseline later may
        // clear the gate.
        return;
    }
    map.insert_landmark(Landmark::new(o.landmark_id, point));
    map.insert_observation(p.kf, o.landmark_id, Observation {
        pixel: p.pixel,
        sigma_px: p.sigma_px,
    });
    map.insert_observation(kf_id, o.landmark_id, Observation {
        pixel: o.pixel,
        sigma_px: o.sigma_px,
    });
    pending.remove(&o.landmark_id);
}
