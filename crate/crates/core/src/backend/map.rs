use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::frontend::{Keyframe, KeyframeId};
use crate::geometry::{project_point, CameraIntrinsics, Pose3};
use crate::simworld::FeatureId;

pub type LandmarkId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapLandmark {
    pub id: LandmarkId,
    /// The physical feature this map point was triangulated from. Several map
    /// points may share a feature until a loop closure merges them.
    pub feature: FeatureId,
    /// Position in the map's world frame.
    pub position: Vector3<f64>,
    pub observers: BTreeSet<KeyframeId>,
}

/// Keyframes, landmarks and their covisibility graph.
///
/// The world frame `W` is the camera frame of the first keyframe. `map_t_world`
/// places it in the planar navigation map frame (the odometry frame at the
/// start of the mapping session).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapState {
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub landmarks: BTreeMap<LandmarkId, MapLandmark>,
    /// Symmetric adjacency: `covisibility[a][b]` = number of landmarks
    /// observed by both `a` and `b`.
    pub covisibility: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>>,
    pub unscaled: bool,
    pub map_t_world: Pose3,
    /// Camera pose in the body frame, needed to map odometry into camera motion.
    pub t_bc: Pose3,
    pub next_keyframe_id: KeyframeId,
    pub next_landmark_id: LandmarkId,
}

impl MapState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// Keyframe that anchors the gauge (the oldest one).
    pub fn anchor(&self) -> Option<KeyframeId> {
        self.keyframes.keys().next().copied()
    }

    /// Inserts a keyframe, assigning it the next id. Associations already on
    /// the keyframe are registered with their landmarks; unknown landmark ids
    /// are dropped.
    pub fn insert_keyframe(&mut self, mut kf: Keyframe) -> KeyframeId {
        let id = self.next_keyframe_id;
        self.next_keyframe_id += 1;
        kf.id = id;
        let assoc = std::mem::take(&mut kf.associations);
        self.keyframes.insert(id, kf);
        for (feature, lm) in assoc {
            self.associate(id, feature, lm);
        }
        id
    }

    pub fn add_landmark(&mut self, feature: FeatureId, position: Vector3<f64>) -> LandmarkId {
        let id = self.next_landmark_id;
        self.next_landmark_id += 1;
        self.landmarks.insert(id, MapLandmark { id, feature, position, observers: BTreeSet::new() });
        id
    }

    /// Attaches keyframe `kf`'s observation of `feature` to landmark `lm`.
    /// Returns false if the keyframe does not observe the feature, the
    /// landmark has a different feature, or either does not exist.
    pub fn associate(&mut self, kf: KeyframeId, feature: FeatureId, lm: LandmarkId) -> bool {
        let Some(k) = self.keyframes.get_mut(&kf) else { return false };
        let Some(l) = self.landmarks.get_mut(&lm) else { return false };
        if l.feature != feature || k.pixel(feature).is_none() {
            return false;
        }
        if let Some(prev) = k.associations.insert(feature, lm) {
            if prev != lm {
                if let Some(p) = self.landmarks.get_mut(&prev) {
                    p.observers.remove(&kf);
                }
            }
        }
        self.landmarks.get_mut(&lm).expect("checked above").observers.insert(kf);
        true
    }

    pub fn dissociate(&mut self, kf: KeyframeId, lm: LandmarkId) {
        if let Some(l) = self.landmarks.get_mut(&lm) {
            l.observers.remove(&kf);
            if let Some(k) = self.keyframes.get_mut(&kf) {
                if k.associations.get(&l.feature) == Some(&lm) {
                    k.associations.remove(&l.feature);
                }
            }
        }
    }

    pub fn remove_landmark(&mut self, lm: LandmarkId) {
        if let Some(l) = self.landmarks.remove(&lm) {
            for kf in l.observers {
                if let Some(k) = self.keyframes.get_mut(&kf) {
                    if k.associations.get(&l.feature) == Some(&lm) {
                        k.associations.remove(&l.feature);
                    }
                }
            }
        }
    }

    /// Removes landmarks with fewer than two observers. Returns how many were removed.
    pub fn cull_landmarks(&mut self) -> usize {
        let weak: Vec<LandmarkId> = self.landmarks.values().filter(|l| l.observers.len() < 2).map(|l| l.id).collect();
        for id in &weak {
            self.remove_landmark(*id);
        }
        weak.len()
    }

    pub fn rebuild_covisibility(&mut self) {
        let mut cov: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>> =
            self.keyframes.keys().map(|k| (*k, BTreeMap::new())).collect();
        for l in self.landmarks.values() {
            let obs: Vec<KeyframeId> = l.observers.iter().copied().collect();
            for (i, a) in obs.iter().enumerate() {
                for b in &obs[i + 1..] {
                    *cov.entry(*a).or_default().entry(*b).or_insert(0) += 1;
                    *cov.entry(*b).or_default().entry(*a).or_insert(0) += 1;
                }
            }
        }
        self.covisibility = cov;
    }

    pub fn covisibility_weight(&self, a: KeyframeId, b: KeyframeId) -> u32 {
        self.covisibility.get(&a).and_then(|m| m.get(&b)).copied().unwrap_or(0)
    }

    /// Neighbors of `kf` with covisibility weight at least `min_weight`.
    pub fn neighbors(&self, kf: KeyframeId, min_weight: u32) -> Vec<KeyframeId> {
        self.covisibility
            .get(&kf)
            .map(|m| m.iter().filter(|(_, w)| **w >= min_weight.max(1)).map(|(k, _)| *k).collect())
            .unwrap_or_default()
    }

    /// `kf` plus its neighbors up to `hops` steps away in the covisibility graph.
    pub fn neighborhood(&self, kf: KeyframeId, hops: usize) -> BTreeSet<KeyframeId> {
        let mut set = BTreeSet::from([kf]);
        let mut frontier = vec![kf];
        for _ in 0..hops {
            let mut next = Vec::new();
            for k in frontier {
                for n in self.neighbors(k, 1) {
                    if set.insert(n) {
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        set
    }

    /// Landmarks associated with any keyframe of `kfs`, keyed by feature.
    /// When a feature has several instances the one with most observers wins.
    pub fn landmarks_by_feature<'a>(
        &self,
        kfs: impl IntoIterator<Item = &'a KeyframeId>,
    ) -> BTreeMap<FeatureId, LandmarkId> {
        let mut out: BTreeMap<FeatureId, LandmarkId> = BTreeMap::new();
        for kf in kfs {
            let Some(k) = self.keyframes.get(kf) else { continue };
            for (f, lm) in &k.associations {
                match out.get(f) {
                    Some(cur) if cur == lm => {}
                    Some(cur) => {
                        let (a, b) = (&self.landmarks[cur], &self.landmarks[lm]);
                        if (b.observers.len(), std::cmp::Reverse(b.id)) > (a.observers.len(), std::cmp::Reverse(a.id)) {
                            out.insert(*f, *lm);
                        }
                    }
                    None => {
                        out.insert(*f, *lm);
                    }
                }
            }
        }
        out
    }

    /// Previous keyframe in id order, if it belongs to the same odometry segment.
    pub fn odometry_predecessor(&self, kf: KeyframeId) -> Option<KeyframeId> {
        let seg = self.keyframes.get(&kf)?.odom_segment;
        let (id, prev) = self.keyframes.range(..kf).next_back()?;
        (prev.odom_segment == seg).then_some(*id)
    }

    pub fn odometry_successor(&self, kf: KeyframeId) -> Option<KeyframeId> {
        let seg = self.keyframes.get(&kf)?.odom_segment;
        let (id, next) = self.keyframes.range(kf + 1..).next()?;
        (next.odom_segment == seg).then_some(*id)
    }

    /// Sum of squared reprojection errors (pixels²) over all associations.
    pub fn reprojection_sse(&self, k: &CameraIntrinsics) -> f64 {
        let mut sse = 0.0;
        for l in self.landmarks.values() {
            for kf in &l.observers {
                let key = &self.keyframes[kf];
                if let (Some(px), Ok(p)) =
                    (key.pixel(l.feature), project_point(&key.t_cw.transform_point(&l.position), k))
                {
                    sse += (p.pixel - px).norm_squared();
                }
            }
        }
        sse
    }

    /// Checks the association bookkeeping and covisibility symmetry.
    pub fn check_consistency(&self) -> Result<(), String> {
        for l in self.landmarks.values() {
            for kf in &l.observers {
                let k = self.keyframes.get(kf).ok_or(format!("landmark {} observed by missing kf {kf}", l.id))?;
                if k.associations.get(&l.feature) != Some(&l.id) {
                    return Err(format!("kf {kf} does not point back to landmark {}", l.id));
                }
            }
        }
        for k in self.keyframes.values() {
            for (f, lm) in &k.associations {
                let l = self.landmarks.get(lm).ok_or(format!("kf {} points to missing landmark {lm}", k.id))?;
                if l.feature != *f || !l.observers.contains(&k.id) {
                    return Err(format!("kf {} association {f}->{lm} not mirrored", k.id));
                }
            }
        }
        for (a, m) in &self.covisibility {
            for (b, w) in m {
                if self.covisibility_weight(*b, *a) != *w {
                    return Err(format!("covisibility {a}-{b} not symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Multiplies every landmark position and keyframe camera center by `s`.
    pub(crate) fn rescale(&mut self, s: f64) {
        for l in self.landmarks.values_mut() {
            l.position *= s;
        }
        for k in self.keyframes.values_mut() {
            let t = *k.t_cw.translation();
            k.t_cw.set_translation(t * s);
        }
    }

    pub fn keyframe_pose(&self, kf: KeyframeId) -> Option<&Pose3> {
        self.keyframes.get(&kf).map(|k| &k.t_cw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::Observation;
    use nalgebra::Vector2;

    fn kf_with(features: &[u64]) -> Keyframe {
        let obs = features.iter().map(|f| Observation { id: *f, pixel: Vector2::new(1.0, 1.0) }).collect();
        Keyframe::new(Pose3::identity(), Pose3::identity(), obs, 0.0, 0)
    }

    #[test]
    fn covisibility_counts_shared_landmarks() {
        let mut m = MapState::new();
        let a = m.insert_keyframe(kf_with(&[1, 2, 3]));
        let b = m.insert_keyframe(kf_with(&[2, 3, 4]));
        let c = m.insert_keyframe(kf_with(&[4]));
        for f in [2, 3] {
            let l = m.add_landmark(f, Vector3::zeros());
            assert!(m.associate(a, f, l));
            assert!(m.associate(b, f, l));
        }
        let l = m.add_landmark(4, Vector3::zeros());
        m.associate(b, 4, l);
        m.associate(c, 4, l);
        m.rebuild_covisibility();
        assert_eq!(m.covisibility_weight(a, b), 2);
        assert_eq!(m.covisibility_weight(b, a), 2);
        assert_eq!(m.covisibility_weight(b, c), 1);
        assert_eq!(m.covisibility_weight(a, c), 0);
        assert_eq!(m.neighborhood(a, 2), BTreeSet::from([a, b, c]));
        m.check_consistency().unwrap();
    }

    #[test]
    fn associate_rejects_mismatched_feature() {
        let mut m = MapState::new();
        let a = m.insert_keyframe(kf_with(&[1]));
        let l = m.add_landmark(2, Vector3::zeros());
        assert!(!m.associate(a, 2, l));
        assert!(!m.associate(a, 1, l));
    }

    #[test]
    fn culling_removes_single_observer_points() {
        let mut m = MapState::new();
        let a = m.insert_keyframe(kf_with(&[1, 2]));
        let b = m.insert_keyframe(kf_with(&[1, 2]));
        let l1 = m.add_landmark(1, Vector3::zeros());
        let l2 = m.add_landmark(2, Vector3::zeros());
        m.associate(a, 1, l1);
        m.associate(b, 1, l1);
        m.associate(a, 2, l2);
        assert_eq!(m.cull_landmarks(), 1);
        assert!(m.landmarks.contains_key(&l1));
        assert!(!m.keyframes[&a].associations.contains_key(&2));
        m.check_consistency().unwrap();
    }
}
