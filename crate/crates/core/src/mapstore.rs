//! Map persistence, place recognition, relocalization and loop closure.

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

use crate::backend::{
    global_bundle_adjust, BaConfig, BackendError, InformationMatrices, LandmarkId, MapLandmark, MapState, SolveReport,
};
use crate::frontend::{fit_matches, match_local_map, Keyframe, KeyframeId, TrackingContext};
use crate::geometry::{CameraIntrinsics, Pose3};
use crate::simworld::{FeatureId, Frame};

pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapStoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed map file: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("map version {found} not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("refusing to save a map without metric scale")]
    Unscaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: LandmarkId,
    pub feature: FeatureId,
    pub xyz: [f64; 3],
    pub observers: Vec<KeyframeId>,
}

/// On-disk map document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub map_version: u32,
    pub intrinsics: CameraIntrinsics,
    pub t_bc: Pose3,
    pub map_t_world: Pose3,
    pub scale_applied: bool,
    pub keyframes: Vec<Keyframe>,
    pub landmarks: Vec<LandmarkRecord>,
    pub covisibility: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>>,
    pub next_keyframe_id: KeyframeId,
    pub next_landmark_id: LandmarkId,
}

impl MapFile {
    pub fn from_map(map: &MapState, intrinsics: &CameraIntrinsics) -> Self {
        Self {
            map_version: MAP_VERSION,
            intrinsics: *intrinsics,
            t_bc: map.t_bc,
            map_t_world: map.map_t_world,
            scale_applied: !map.unscaled,
            keyframes: map.keyframes.values().cloned().collect(),
            landmarks: map
                .landmarks
                .values()
                .map(|l| LandmarkRecord {
                    id: l.id,
                    feature: l.feature,
                    xyz: [l.position.x, l.position.y, l.position.z],
                    observers: l.observers.iter().copied().collect(),
                })
                .collect(),
            covisibility: map.covisibility.clone(),
            next_keyframe_id: map.next_keyframe_id,
            next_landmark_id: map.next_landmark_id,
        }
    }

    pub fn into_map(self) -> (MapState, CameraIntrinsics) {
        let map = MapState {
            keyframes: self.keyframes.into_iter().map(|k| (k.id, k)).collect(),
            landmarks: self
                .landmarks
                .into_iter()
                .map(|l| {
                    let lm = MapLandmark {
                        id: l.id,
                        feature: l.feature,
                        position: nalgebra::Vector3::from(l.xyz),
                        observers: l.observers.into_iter().collect(),
                    };
                    (lm.id, lm)
                })
                .collect(),
            covisibility: self.covisibility,
            unscaled: !self.scale_applied,
            map_t_world: self.map_t_world,
            t_bc: self.t_bc,
            next_keyframe_id: self.next_keyframe_id,
            next_landmark_id: self.next_landmark_id,
        };
        (map, self.intrinsics)
    }
}

/// SHA-256 of the canonical JSON encoding of the map.
pub fn map_checksum(map: &MapState, intrinsics: &CameraIntrinsics) -> String {
    let bytes = serde_json::to_vec(&MapFile::from_map(map, intrinsics)).expect("map serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn save_map(map: &MapState, intrinsics: &CameraIntrinsics, path: &Path) -> Result<(), MapStoreError> {
    if map.unscaled {
        return Err(MapStoreError::Unscaled);
    }
    let bytes = serde_json::to_vec(&MapFile::from_map(map, intrinsics))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<(MapState, CameraIntrinsics), MapStoreError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("map_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == MAP_VERSION as u64 => {}
        Some(v) => return Err(MapStoreError::Version { found: v, expected: MAP_VERSION }),
        None => return Err(MapStoreError::Schema(serde::de::Error::missing_field("map_version"))),
    }
    let file: MapFile = serde_json::from_value(value)?;
    let (map, k) = file.into_map();
    map.check_consistency().map_err(|e| MapStoreError::Schema(serde::de::Error::custom(e)))?;
    Ok((map, k))
}

/// Set of feature ids observed by a keyframe, used for place recognition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceSignature {
    pub kf_id: KeyframeId,
    pub features: BTreeSet<FeatureId>,
}

impl PlaceSignature {
    pub fn of(kf: &Keyframe) -> Self {
        Self { kf_id: kf.id, features: kf.feature_ids() }
    }

    pub fn overlap(&self, other: &BTreeSet<FeatureId>) -> f64 {
        jaccard(&self.features, other)
    }
}

pub fn jaccard(a: &BTreeSet<FeatureId>, b: &BTreeSet<FeatureId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Keyframe with the highest overlap among `candidates`; ties go to the newest.
fn best_place<'a>(
    map: &MapState,
    features: &BTreeSet<FeatureId>,
    candidates: impl Iterator<Item = &'a KeyframeId>,
) -> Option<(KeyframeId, f64)> {
    candidates
        .map(|id| (*id, PlaceSignature::of(&map.keyframes[id]).overlap(features)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceConfig {
    /// Minimum Jaccard overlap of feature-id sets.
    pub min_overlap: f64,
    /// Loop candidates must be at least this many keyframes older.
    pub min_keyframe_separation: u64,
}

impl Default for PlaceConfig {
    fn default() -> Self {
        Self { min_overlap: 0.2, min_keyframe_separation: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relocalization {
    pub keyframe: KeyframeId,
    pub overlap: f64,
    pub pose: Pose3,
    pub inliers: BTreeMap<FeatureId, LandmarkId>,
}

/// Finds the best-matching keyframe and fits the frame's pose starting from
/// it. Success requires the tracker's inlier threshold.
pub fn relocalize(
    map: &MapState,
    frame: &Frame,
    ctx: &TrackingContext,
    config: &PlaceConfig,
) -> Option<Relocalization> {
    if frame.observations.is_empty() || map.keyframes.is_empty() {
        return None;
    }
    let features: BTreeSet<FeatureId> = frame.observations.iter().map(|o| o.id).collect();
    let (kf, overlap) = best_place(map, &features, map.keyframes.keys())?;
    if overlap < config.min_overlap {
        return None;
    }
    let seed = map.keyframes[&kf].t_cw;
    let local = map.neighborhood(kf, ctx.config.local_map_hops);
    let matches = match_local_map(map, &local, frame, &seed, ctx.k, None);
    if matches.len() < ctx.config.min_inliers {
        return None;
    }
    let fit = fit_matches(map, &matches, &seed, ctx);
    (fit.inliers.len() >= ctx.config.min_inliers).then_some(Relocalization {
        keyframe: kf,
        overlap,
        pose: fit.pose,
        inliers: fit.inliers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopClosure {
    pub new_kf: KeyframeId,
    pub candidate: KeyframeId,
    pub overlap: f64,
    pub merged_landmarks: usize,
    pub new_associations: usize,
    /// Poses of the candidate and the new keyframe before the correction.
    pub candidate_pose_before: Pose3,
    pub new_pose_before: Pose3,
    pub report: SolveReport,
}

/// Merges every instance of `feature` into the oldest one. Returns how many
/// instances were removed.
fn merge_feature(map: &mut MapState, instances: &[LandmarkId]) -> usize {
    let Some((&keep, dups)) = instances.split_first() else { return 0 };
    let feature = map.landmarks[&keep].feature;
    for dup in dups {
        let observers: Vec<KeyframeId> = map.landmarks[dup].observers.iter().copied().collect();
        map.remove_landmark(*dup);
        for kf in observers {
            // A keyframe may already see the kept instance.
            map.associate(kf, feature, keep);
        }
    }
    dups.len()
}

/// Detects a revisit of a non-covisible place and closes the loop by merging
/// duplicate landmark instances and running global bundle adjustment.
pub fn detect_and_close_loop(
    map: &mut MapState,
    new_kf: KeyframeId,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    ba: &BaConfig,
    config: &PlaceConfig,
) -> Result<Option<LoopClosure>, BackendError> {
    let Some(kf) = map.keyframes.get(&new_kf) else { return Err(BackendError::UnknownKeyframe(new_kf)) };
    let features = kf.feature_ids();
    let covisible = map.neighborhood(new_kf, 1);
    let candidates: Vec<KeyframeId> = map
        .keyframes
        .keys()
        .copied()
        .filter(|id| !covisible.contains(id) && id + config.min_keyframe_separation <= new_kf)
        .collect();
    let Some((candidate, overlap)) = best_place(map, &features, candidates.iter()) else { return Ok(None) };
    if overlap < config.min_overlap {
        return Ok(None);
    }
    let candidate_pose_before = map.keyframes[&candidate].t_cw;
    let new_pose_before = map.keyframes[&new_kf].t_cw;

    let mut instances: BTreeMap<FeatureId, Vec<LandmarkId>> = BTreeMap::new();
    for l in map.landmarks.values() {
        if features.contains(&l.feature) {
            instances.entry(l.feature).or_default().push(l.id);
        }
    }
    let mut merged = 0;
    for ids in instances.values().filter(|v| v.len() > 1) {
        merged += merge_feature(map, ids);
    }

    let by_feature: BTreeMap<FeatureId, LandmarkId> = map.landmarks.values().rev().map(|l| (l.feature, l.id)).collect();
    let mut involved = map.neighborhood(new_kf, 1);
    involved.extend(map.neighborhood(candidate, 1));
    let mut new_associations = 0;
    for id in involved {
        let missing: Vec<FeatureId> = map.keyframes[&id]
            .observations
            .iter()
            .map(|o| o.id)
            .filter(|f| !map.keyframes[&id].associations.contains_key(f))
            .collect();
        for f in missing {
            if let Some(lm) = by_feature.get(&f) {
                if map.associate(id, f, *lm) {
                    new_associations += 1;
                }
            }
        }
    }
    map.rebuild_covisibility();
    let cfg = BaConfig { use_odometry: ba.use_odometry && !map.unscaled, ..*ba };
    let report = global_bundle_adjust(map, k, omega, &cfg)?;
    info!("loop closed between keyframes {candidate} and {new_kf} (overlap {overlap:.2}, {merged} merged)");
    Ok(Some(LoopClosure {
        new_kf,
        candidate,
        overlap,
        merged_landmarks: merged,
        new_associations,
        candidate_pose_before,
        new_pose_before,
        report,
    }))
}
