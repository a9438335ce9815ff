//! Shared map state: keyframes, landmarks, observations and the uncertainty
//! attached to each of them.
//!
//! Everything is stored in `BTreeMap`s keyed by dense integer ids. That is
//! deliberate: iteration order is part of the numerical contract (factor
//! ordering changes floating-point sums), and ordered maps make every solve
//! reproducible byte-for-byte for a given input.

use crate::camera::Pixel;
use crate::se3::Pose;
use crate::uncertainty::{PointUncertainty, PoseUncertainty};
use nalgebra::{Matrix6, Vector3};
use std::collections::{BTreeMap, BTreeSet};

pub type KeyframeId = u64;
pub type LandmarkId = u64;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// Frame index in the source sequence this keyframe was taken from.
    pub frame_id: u64,
    pub timestamp: f64,
    /// World-to-camera pose.
    pub pose: Pose,
    pub uncertainty: PoseUncertainty,
    /// Diagonal 6×6 block of the Gauss-Newton Hessian from the most recent
    /// solve in which this pose was free; feeds the pose covariance.
    pub hessian: Option<Matrix6<f64>>,
}

impl Keyframe {
    pub fn new(id: KeyframeId, frame_id: u64, timestamp: f64, pose: Pose) -> Self {
        Keyframe {
            id,
            frame_id,
            timestamp,
            pose,
            uncertainty: PoseUncertainty::zero(),
            hessian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: LandmarkId,
    /// Position in world coordinates.
    pub position: Vector3<f64>,
    pub uncertainty: PointUncertainty,
    /// Most recent 3D observation residuals (refreshed, capped).
    pub residuals: Vec<Vector3<f64>>,
}

impl Landmark {
    pub fn new(id: LandmarkId, position: Vector3<f64>) -> Self {
        Landmark {
            id,
            position,
            uncertainty: PointUncertainty::zero(),
            residuals: Vec::new(),
        }
    }
}

/// A single pixel measurement of a landmark from a keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: Pixel,
    /// Isotropic pixel noise σ reported by the front end (0 = unknown,
    /// consumers substitute the configured default).
    pub sigma_px: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MapState {
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    observations: BTreeMap<(KeyframeId, LandmarkId), Observation>,
    /// Reverse index: keyframes observing each landmark.
    observers: BTreeMap<LandmarkId, BTreeSet<KeyframeId>>,
}

impl MapState {
    pub fn new() -> Self {
        Self::default()
    }

    // ----- insertion / removal --------------------------------------------

    /// Inserts a keyframe (replacing any previous one with the same id).
    pub fn insert_keyframe(&mut self, kf: Keyframe) {
        self.keyframes.insert(kf.id, kf);
    }

    pub fn insert_landmark(&mut self, lm: Landmark) {
        self.landmarks.insert(lm.id, lm);
    }

    /// Records a measurement; both endpoints must already exist.
    pub fn insert_observation(
        &mut self,
        kf_id: KeyframeId,
        lm_id: LandmarkId,
        obs: Observation,
    ) {
        debug_assert!(self.keyframes.contains_key(&kf_id), "unknown keyframe");
        debug_assert!(self.landmarks.contains_key(&lm_id), "unknown landmark");
        self.observations.insert((kf_id, lm_id), obs);
        self.observers.entry(lm_id).or_default().insert(kf_id);
    }

    /// Removes a landmark together with its observations, returning it.
    pub fn remove_landmark(&mut self, lm_id: LandmarkId) -> Option<Landmark> {
        let lm = self.landmarks.remove(&lm_id)?;
        if let Some(observers) = self.observers.remove(&lm_id) {
            for kf_id in observers {
                self.observations.remove(&(kf_id, lm_id));
            }
        }
        Some(lm)
    }

    // ----- accessors --------------------------------------------------------

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    pub fn keyframe_mut(&mut self, id: KeyframeId) -> Option<&mut Keyframe> {
        self.keyframes.get_mut(&id)
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        self.landmarks.get(&id)
    }

    pub fn landmark_mut(&mut self, id: LandmarkId) -> Option<&mut Landmark> {
        self.landmarks.get_mut(&id)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.values()
    }

    pub fn keyframe_ids(&self) -> impl Iterator<Item = KeyframeId> + '_ {
        self.keyframes.keys().copied()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.values()
    }

    pub fn landmark_ids(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.landmarks.keys().copied()
    }

    pub fn landmark_ids_mut(&mut self) -> Vec<LandmarkId> {
        self.landmarks.keys().copied().collect()
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn observation(&self, kf_id: KeyframeId, lm_id: LandmarkId) -> Option<&Observation> {
        self.observations.get(&(kf_id, lm_id))
    }

    /// Observations made from one keyframe, in landmark-id order.
    pub fn observations_of_keyframe(
        &self,
        kf_id: KeyframeId,
    ) -> impl Iterator<Item = (LandmarkId, &Observation)> {
        self.observations
            .range((kf_id, LandmarkId::MIN)..=(kf_id, LandmarkId::MAX))
            .map(|((_, lm), obs)| (*lm, obs))
    }

    /// Keyframes observing one landmark, in keyframe-id order.
    pub fn observers_of_landmark(
        &self,
        lm_id: LandmarkId,
    ) -> impl Iterator<Item = (KeyframeId, &Observation)> {
        self.observers
            .get(&lm_id)
            .into_iter()
            .flatten()
            .map(move |kf_id| (*kf_id, &self.observations[&(*kf_id, lm_id)]))
    }

    pub fn n_observers(&self, lm_id: LandmarkId) -> usize {
        self.observers.get(&lm_id).map_or(0, |s| s.len())
    }

    // ----- derived quantities ----------------------------------------------

    /// Number of landmarks two keyframes observe in common.
    pub fn covisibility(&self, a: KeyframeId, b: KeyframeId) -> usize {
        self.observations_of_keyframe(a)
            .filter(|(lm, _)| self.observations.contains_key(&(b, *lm)))
            .count()
    }

    /// All keyframes sharing at least one landmark with `kf_id` (itself
    /// excluded), with shared-landmark counts.
    pub fn covisible_keyframes(&self, kf_id: KeyframeId) -> BTreeMap<KeyframeId, usize> {
        let mut counts = BTreeMap::new();
        for (lm_id, _) in self.observations_of_keyframe(kf_id) {
            for (other, _) in self.observers_of_landmark(lm_id) {
                if other != kf_id {
                    *counts.entry(other).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    /// Median distance from observing camera to landmark over all
    /// observations — the "scene depth" used to scale priors.
    pub fn median_scene_depth(&self) -> Option<f64> {
        let mut depths: Vec<f64> = self
            .observations
            .keys()
            .filter_map(|(kf_id, lm_id)| {
                let kf = self.keyframes.get(kf_id)?;
                let lm = self.landmarks.get(lm_id)?;
                Some(kf.pose.act(&lm.position).norm())
            })
            .collect();
        if depths.is_empty() {
            return None;
        }
        depths.sort_by(|a, b| a.total_cmp(b));
        Some(depths[depths.len() / 2])
    }

    /// Trajectory extent: diagonal of the axis-aligned bounding box of the
    /// keyframe centers. Zero for fewer than two keyframes.
    pub fn trajectory_extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for kf in self.keyframes.values() {
            let c = kf.pose.center();
            lo = lo.inf(&c);
            hi = hi.sup(&c);
            any = true;
        }
        if !any {
            return 0.0;
        }
        (hi - lo).norm()
    }
}
