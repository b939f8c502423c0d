//! Metric scale from wheel odometry.
//!
//! The ratio of odometry path to visual path over consecutive keyframes gives
//! the factor that brings the monocular map to meters.

use log::info;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{global_bundle_adjust, BaConfig, BackendError, InformationMatrices, MapState, SolveReport};
use crate::frontend::Keyframe;
use crate::geometry::{CameraIntrinsics, Pose3};

/// Visual path lengths below this are treated as no motion.
pub const MIN_VISUAL_PATH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("need at least 2 keyframes of one odometry segment, got {0}")]
    TooFewKeyframes(usize),
    #[error("visual path {0:e} too short to estimate scale")]
    DegenerateMotion(f64),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("map is already metric")]
    AlreadyScaled,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub s: f64,
    pub n_keyframes_used: usize,
    pub applied: bool,
}

/// `sqrt(Σ‖metric‖²) / sqrt(Σ‖visual‖²)` over paired increments.
pub fn scale_from_increments(metric: &[Vector3<f64>], visual: &[Vector3<f64>]) -> Result<f64, ScaleError> {
    let m: f64 = metric.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    let v: f64 = visual.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    if !(v > MIN_VISUAL_PATH) {
        return Err(ScaleError::DegenerateMotion(v));
    }
    Ok(m / v)
}

/// Estimates the scale from consecutive keyframe pairs that share an
/// odometry segment. Keyframes must be in creation order.
pub fn estimate_scale(keyframes: &[&Keyframe], t_bc: &Pose3) -> Result<ScaleEstimate, ScaleError> {
    let mut metric = Vec::new();
    let mut visual = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for pair in keyframes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.odom_segment != b.odom_segment {
            continue;
        }
        let ca = a.odom_t_ob.compose(t_bc);
        let cb = b.odom_t_ob.compose(t_bc);
        metric.push(cb.translation() - ca.translation());
        visual.push(b.camera_center() - a.camera_center());
        used.insert(a.id);
        used.insert(b.id);
    }
    if used.len() < 2 {
        return Err(ScaleError::TooFewKeyframes(used.len()));
    }
    let s = scale_from_increments(&metric, &visual)?;
    Ok(ScaleEstimate { s, n_keyframes_used: used.len(), applied: false })
}

/// Scales landmarks and keyframe centers by `s` and marks the map metric.
pub fn apply_scale(map: &mut MapState, s: f64) -> Result<(), ScaleError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(ScaleError::InvalidScale(s));
    }
    if !map.unscaled {
        return Err(ScaleError::AlreadyScaled);
    }
    map.rescale(s);
    map.unscaled = false;
    Ok(())
}

/// Result of the one-off scale initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleInit {
    pub estimate: ScaleEstimate,
    pub global_ba: SolveReport,
}

/// Estimates the scale over every keyframe, applies it, then runs global
/// bundle adjustment. On a failed solve the map is left scaled but
/// unoptimized and the error is returned.
pub fn initialize_scale(
    map: &mut MapState,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    ba: &BaConfig,
) -> Result<ScaleInit, ScaleError> {
    let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
    let mut estimate = estimate_scale(&kfs, &map.t_bc)?;
    apply_scale(map, estimate.s)?;
    estimate.applied = true;
    info!("metric scale {:.6} from {} keyframes", estimate.s, estimate.n_keyframes_used);
    let global_ba = global_bundle_adjust(map, k, omega, ba)?;
    Ok(ScaleInit { estimate, global_ba })
}

/// Map units per meter implied by the keyframes of an unscaled map.
pub fn provisional_units_per_meter(map: &MapState) -> Option<f64> {
    if !map.unscaled {
        return Some(1.0);
    }
    let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
    estimate_scale(&kfs, &map.t_bc).ok().map(|e| 1.0 / e.s).filter(|u| u.is_finite() && *u > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::Observation;
    use nalgebra::Vector2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn v(x: f64) -> Vector3<f64> {
        Vector3::new(x, 0.0, 0.0)
    }

    #[test]
    fn direct_arithmetic() {
        assert_eq!(scale_from_increments(&[v(2.0), v(2.0)], &[v(1.0), v(1.0)]).unwrap(), 2.0);
        assert_eq!(scale_from_increments(&[v(1.0), v(3.0)], &[v(1.0), v(3.0)]).unwrap(), 1.0);
        let s = scale_from_increments(&[v(3.0), v(4.0)], &[v(1.0), v(1.0)]).unwrap();
        assert!((s - 3.5355339059327378).abs() < 1e-15);
        assert!(matches!(scale_from_increments(&[v(1.0)], &[v(0.0)]), Err(ScaleError::DegenerateMotion(_))));
    }

    /// Keyframes whose visual centers are `truth / scale` while odometry sees `truth`.
    fn keyframes(truth: &[Vector3<f64>], odom: &[Vector3<f64>], scale: f64, t_bc: &Pose3) -> MapState {
        let mut map = MapState::new();
        map.t_bc = *t_bc;
        map.unscaled = true;
        let k = CameraIntrinsics::default();
        for (i, (p, o)) in truth.iter().zip(odom).enumerate() {
            let body_gt = Pose3::from_planar(p.x, p.y, 0.0, 0.1 * i as f64);
            let cam = body_gt.compose(t_bc);
            let vis = Pose3::new(*cam.rotation(), cam.translation() / scale);
            let body_odo = Pose3::from_planar(o.x, o.y, 0.0, 0.1 * i as f64);
            let obs = vec![Observation { id: 1, pixel: Vector2::new(k.cx, k.cy) }];
            map.insert_keyframe(Keyframe::new(vis.inverse(), body_odo, obs, i as f64, 0));
        }
        // One landmark so rescaling is visible in the reprojection cost.
        let ahead = map.keyframes[&0].t_cw.inverse().transform_point(&Vector3::new(0.1, 0.1, 2.0));
        let lm = map.add_landmark(1, ahead);
        map.associate(0, 1, lm);
        map.associate(1, 1, lm);
        assert!(map.reprojection_sse(&k) > 0.0);
        map
    }

    fn path(n: usize, step: f64) -> Vec<Vector3<f64>> {
        (0..n).map(|i| Vector3::new(1.0 + step * i as f64, 2.0 + 0.1 * (i as f64).sin(), 0.0)).collect()
    }

    #[test]
    fn estimate_then_apply_is_consistent() {
        let t_bc = crate::simworld::default_t_bc();
        let truth = path(10, 0.3);
        let mut map = keyframes(&truth, &truth, 4.0, &t_bc);
        let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
        let e = estimate_scale(&kfs, &t_bc).unwrap();
        assert!((e.s - 4.0).abs() < 1e-9);
        assert_eq!(e.n_keyframes_used, 10);
        let k = CameraIntrinsics::default();
        let before = map.reprojection_sse(&k);
        apply_scale(&mut map, e.s).unwrap();
        assert!((map.reprojection_sse(&k) - before).abs() < 1e-9);
        map.unscaled = true;
        let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
        let again = estimate_scale(&kfs, &t_bc).unwrap();
        assert!((again.s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn apply_preconditions() {
        let t_bc = crate::simworld::default_t_bc();
        let truth = path(3, 0.3);
        let mut map = keyframes(&truth, &truth, 1.0, &t_bc);
        let before = map.clone();
        apply_scale(&mut map, 1.0).unwrap();
        assert!(!map.unscaled);
        assert_eq!(map.keyframes, before.keyframes);
        assert_eq!(map.landmarks, before.landmarks);
        assert!(matches!(apply_scale(&mut map, 2.0), Err(ScaleError::AlreadyScaled)));
        let mut m2 = before.clone();
        assert!(matches!(apply_scale(&mut m2, -1.0), Err(ScaleError::InvalidScale(_))));

        let d_before = (before.keyframes[&1].camera_center() - before.keyframes[&0].camera_center()).norm();
        let mut m3 = before;
        apply_scale(&mut m3, 2.0).unwrap();
        let d0 = (m3.keyframes[&1].camera_center() - m3.keyframes[&0].camera_center()).norm();
        assert!((d0 - 2.0 * d_before).abs() < 1e-12);
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let t_bc = Pose3::identity();
        let truth = vec![Vector3::new(1.0, 1.0, 0.0); 4];
        let map = keyframes(&truth, &path(4, 0.3), 1.0, &t_bc);
        let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
        assert!(matches!(estimate_scale(&kfs, &t_bc), Err(ScaleError::DegenerateMotion(_))));
        assert!(matches!(estimate_scale(&kfs[..1], &t_bc), Err(ScaleError::TooFewKeyframes(0))));
    }

    #[test]
    fn noisy_odometry_stays_within_five_percent() {
        // 2 %/m random-walk noise on odometry, 3.3 m of travel, 20 seeds.
        let t_bc = crate::simworld::default_t_bc();
        let truth = path(12, 0.3);
        let mut within = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut odom = vec![truth[0]];
            for w in truth.windows(2) {
                let d = w[1] - w[0];
                let n = Normal::new(0.0, 0.02 * d.norm().sqrt()).unwrap();
                let noisy = d + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), 0.0);
                odom.push(odom.last().unwrap() + noisy);
            }
            let map = keyframes(&truth, &odom, 2.5, &t_bc);
            let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
            let s = estimate_scale(&kfs, &t_bc).unwrap().s;
            if ((s - 2.5) / 2.5).abs() < 0.05 {
                within += 1;
            }
        }
        assert!(within >= 18, "{within}/20");
    }

    proptest! {
        #[test]
        fn rescaling_keeps_reprojection_cost(s in 0.1f64..20.0, step in 0.05f64..0.5) {
            let t_bc = crate::simworld::default_t_bc();
            let truth = path(5, step);
            let mut map = keyframes(&truth, &truth, 3.0, &t_bc);
            let k = CameraIntrinsics::default();
            let before = map.reprojection_sse(&k);
            apply_scale(&mut map, s).unwrap();
            prop_assert!((map.reprojection_sse(&k) - before).abs() <= 1e-9 * before.max(1.0));
        }

        #[test]
        fn estimate_recovers_any_scale(s in 0.01f64..100.0) {
            let t_bc = crate::simworld::default_t_bc();
            let truth = path(6, 0.3);
            let map = keyframes(&truth, &truth, s, &t_bc);
            let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
            let e = estimate_scale(&kfs, &t_bc).unwrap();
            prop_assert!((e.s - s).abs() <= 1e-9 * s);
        }
    }
}
