use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::backend::LandmarkId;
use crate::geometry::Pose3;
use crate::simworld::{FeatureId, Observation};

pub type KeyframeId = u64;

/// A frame promoted to an optimization variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// World-to-camera transform (the tracker's estimate).
    pub t_cw: Pose3,
    /// Body pose in the odometry frame at capture time.
    pub odom_t_ob: Pose3,
    /// Raw observations sorted by feature id.
    pub observations: Vec<Observation>,
    pub timestamp: f64,
    /// Odometry is only comparable between keyframes of the same segment.
    pub odom_segment: u32,
    /// Which map landmark each observed feature is attached to.
    pub associations: BTreeMap<FeatureId, LandmarkId>,
}

impl Keyframe {
    pub fn new(
        t_cw: Pose3,
        odom_t_ob: Pose3,
        mut observations: Vec<Observation>,
        timestamp: f64,
        odom_segment: u32,
    ) -> Self {
        observations.sort_by_key(|o| o.id);
        observations.dedup_by_key(|o| o.id);
        Self { id: 0, t_cw, odom_t_ob, observations, timestamp, odom_segment, associations: BTreeMap::new() }
    }

    pub fn pixel(&self, feature: FeatureId) -> Option<Vector2<f64>> {
        self.observations.binary_search_by_key(&feature, |o| o.id).ok().map(|i| self.observations[i].pixel)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        *self.t_cw.inverse().translation()
    }

    /// Place signature: the set of observed feature ids.
    pub fn feature_ids(&self) -> BTreeSet<FeatureId> {
        self.observations.iter().map(|o| o.id).collect()
    }
}
