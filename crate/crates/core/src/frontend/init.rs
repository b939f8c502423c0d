use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Keyframe;
use crate::backend::{
    bundle_adjust, global_window, odometry_camera_motion, refine_point, triangulate_midpoint, BaConfig,
    InformationMatrices, MapState, SolveKind,
};
use crate::geometry::{CameraIntrinsics, Pose3};
use crate::simworld::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("only {found} shared observations, need {needed}")]
    TooFewShared { found: usize, needed: usize },
    #[error("median parallax {degrees:.3} deg below threshold")]
    LowParallax { degrees: f64 },
    #[error("two-view reconstruction degenerate: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub min_shared: usize,
    pub min_parallax_deg: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { min_shared: 20, min_parallax_deg: 1.0 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds an unscaled two-keyframe map.
///
/// The odometry increment seeds the relative pose; points are triangulated
/// by ray midpoints and jointly refined with the second pose by visual-only
/// bundle adjustment. The result is normalized so that the median depth in
/// the first keyframe is 1. The first keyframe sits at the identity.
pub fn initialize_two_view(
    frame_a: &Frame,
    frame_b: &Frame,
    k: &CameraIntrinsics,
    t_bc: &Pose3,
    omega: &InformationMatrices,
    config: &InitConfig,
    odom_segment: u32,
) -> Result<MapState, InitError> {
    let b_pixels: std::collections::BTreeMap<u64, nalgebra::Vector2<f64>> =
        frame_b.observations.iter().map(|o| (o.id, o.pixel)).collect();
    let shared: Vec<(u64, nalgebra::Vector2<f64>, nalgebra::Vector2<f64>)> =
        frame_a.observations.iter().filter_map(|o| b_pixels.get(&o.id).map(|pb| (o.id, o.pixel, *pb))).collect();
    if shared.len() < config.min_shared {
        return Err(InitError::TooFewShared { found: shared.len(), needed: config.min_shared });
    }

    // Camera b in camera a's frame.
    let t_ab = odometry_camera_motion(&frame_a.odometry_pose, &frame_b.odometry_pose, t_bc);
    let r_ab = t_ab.rotation_matrix();
    let parallax: Vec<f64> = shared
        .iter()
        .map(|(_, pa, pb)| {
            let da = k.bearing(pa).normalize();
            let db = (r_ab * k.bearing(pb)).normalize();
            da.dot(&db).clamp(-1.0, 1.0).acos()
        })
        .collect();
    let med = median(parallax).to_degrees();
    if !(med > config.min_parallax_deg) {
        return Err(InitError::LowParallax { degrees: med });
    }

    let pose_b = t_ab.inverse();
    let mut map = MapState::new();
    map.t_bc = *t_bc;
    map.unscaled = true;
    let a = map.insert_keyframe(Keyframe::new(
        Pose3::identity(),
        frame_a.odometry_pose,
        frame_a.observations.clone(),
        frame_a.timestamp,
        odom_segment,
    ));
    let b = map.insert_keyframe(Keyframe::new(
        pose_b,
        frame_b.odometry_pose,
        frame_b.observations.clone(),
        frame_b.timestamp,
        odom_segment,
    ));
    let c_b = *t_ab.translation();
    for (id, pa, pb) in &shared {
        let da = k.bearing(pa).normalize();
        let db = (r_ab * k.bearing(pb)).normalize();
        let Some(p) = triangulate_midpoint(&nalgebra::Vector3::zeros(), &da, &c_b, &db) else { continue };
        let views = [(Pose3::identity(), *pa), (pose_b, *pb)];
        let Some(p) = refine_point(p, &views, k) else { continue };
        if views.iter().any(|(t, _)| t.transform_point(&p).z < k.min_depth) {
            continue;
        }
        let lm = map.add_landmark(*id, p);
        map.associate(a, *id, lm);
        map.associate(b, *id, lm);
    }
    if map.landmarks.len() < config.min_shared {
        return Err(InitError::Degenerate(format!("{} points triangulated", map.landmarks.len())));
    }
    map.rebuild_covisibility();

    let cfg = BaConfig { use_odometry: false, ..BaConfig::default() };
    let window = global_window(&map).map_err(|e| InitError::Degenerate(e.to_string()))?;
    bundle_adjust(&mut map, &window, k, omega, &cfg, SolveKind::Global, Some(b))
        .map_err(|e| InitError::Degenerate(e.to_string()))?;
    if map.landmarks.len() < config.min_shared {
        return Err(InitError::Degenerate(format!("{} points survived refinement", map.landmarks.len())));
    }

    let depth = median(map.landmarks.values().map(|l| l.position.z).collect());
    if !(depth > 0.0) {
        return Err(InitError::Degenerate("non-positive median depth".into()));
    }
    map.rescale(1.0 / depth);
    map.map_t_world = frame_a.odometry_pose.compose(t_bc);
    Ok(map)
}
