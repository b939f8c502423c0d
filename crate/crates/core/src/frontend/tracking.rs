use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use super::KeyframeId;
use crate::backend::{odometry_camera_motion, reprojection_jacobians, InformationMatrices, LandmarkId, MapState};
use crate::geometry::{exp_se3, CameraIntrinsics, Pose3, Twist6};
use crate::simworld::{FeatureId, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrackStatus {
    Uninitialized,
    TrackingVisual,
    OdometryOnly,
    Lost,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Uninitialized => "uninitialized",
            TrackStatus::TrackingVisual => "visual",
            TrackStatus::OdometryOnly => "odometry",
            TrackStatus::Lost => "lost",
        }
    }
}

impl std::str::FromStr for TrackStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uninitialized" => TrackStatus::Uninitialized,
            "visual" => TrackStatus::TrackingVisual,
            "odometry" => TrackStatus::OdometryOnly,
            "lost" => TrackStatus::Lost,
            other => return Err(format!("unknown tracking status '{other}'")),
        })
    }
}

/// Tracker output for one frame plus what the next frame needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub status: TrackStatus,
    pub t_cw: Pose3,
    pub inlier_count: usize,
    pub timestamp: f64,
    pub odom_t_ob: Pose3,
    /// Keyframe sharing most tracked landmarks, with its pose at tracking time.
    pub reference: Option<(KeyframeId, Pose3)>,
    /// Inlier associations of this frame.
    pub tracked: BTreeMap<FeatureId, LandmarkId>,
}

impl TrackState {
    pub fn uninitialized() -> Self {
        Self {
            status: TrackStatus::Uninitialized,
            t_cw: Pose3::identity(),
            inlier_count: 0,
            timestamp: 0.0,
            odom_t_ob: Pose3::identity(),
            reference: None,
            tracked: BTreeMap::new(),
        }
    }

    /// Re-expresses the state after the map was scaled by `s`.
    pub fn rescale(&mut self, s: f64) {
        let t = *self.t_cw.translation();
        self.t_cw.set_translation(t * s);
        if let Some((_, p)) = &mut self.reference {
            let t = *p.translation();
            p.set_translation(t * s);
        }
    }

    /// Follows the reference keyframe if the backend moved it since tracking.
    pub fn corrected_pose(&self, map: &MapState) -> Pose3 {
        match &self.reference {
            Some((id, old)) => match map.keyframe_pose(*id) {
                Some(new) if new != old => self.t_cw.compose(&old.inverse()).compose(new),
                _ => self.t_cw,
            },
            None => self.t_cw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub min_inliers: usize,
    /// Matches further than this from the predicted projection are discarded.
    pub search_radius_px: f64,
    /// Covisibility hops around the reference keyframe forming the local map.
    pub local_map_hops: usize,
    pub max_iterations: usize,
    pub chi2_gate: f64,
    pub huber_delta: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            min_inliers: 15,
            search_radius_px: 40.0,
            local_map_hops: 2,
            max_iterations: 20,
            chi2_gate: 5.99,
            huber_delta: 5.99f64.sqrt(),
        }
    }
}

/// Thresholds for promoting a tracked frame to a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    /// Odometry translation since the last keyframe, meters.
    pub max_translation: f64,
    /// Rotation since the last keyframe, radians.
    pub max_rotation: f64,
    /// Tracked landmarks relative to those of the last keyframe.
    pub min_tracked_ratio: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { max_translation: 0.3, max_rotation: 0.25, min_tracked_ratio: 0.7 }
    }
}

/// Everything the tracker reads besides the map and the frame.
#[derive(Debug, Clone, Copy)]
pub struct TrackingContext<'a> {
    pub k: &'a CameraIntrinsics,
    pub t_bc: &'a Pose3,
    pub omega: &'a InformationMatrices,
    pub config: &'a TrackerConfig,
    /// Map units per meter of odometry; 1 once the map is metric.
    pub units_per_meter: f64,
    /// Whether a failed frame may fall back to the odometry prediction.
    pub allow_fallback: bool,
}

/// Camera pose predicted by moving `prev_t_cw` with the odometry increment.
pub fn predict_from_odometry(
    prev_t_cw: &Pose3,
    prev_odom: &Pose3,
    curr_odom: &Pose3,
    t_bc: &Pose3,
    units_per_meter: f64,
) -> Pose3 {
    let mut motion = odometry_camera_motion(prev_odom, curr_odom, t_bc);
    if units_per_meter != 1.0 {
        let t = *motion.translation();
        motion.set_translation(t * units_per_meter);
    }
    motion.inverse().compose(prev_t_cw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFit {
    pub pose: Pose3,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    pub iterations: usize,
}

fn whitened_error(
    pose: &Pose3,
    p: &Vector3<f64>,
    px: &Vector2<f64>,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
) -> Option<f64> {
    let pc = pose.transform_point(p);
    if pc.z < k.min_depth {
        return None;
    }
    let r = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px;
    Some((r.transpose() * omega.omega_vis * r)[0])
}

fn huber(e2: f64, delta: f64) -> (f64, f64) {
    if e2 <= delta * delta {
        (e2, 1.0)
    } else {
        let e = e2.sqrt();
        (2.0 * delta * e - delta * delta, delta / e)
    }
}

fn pose_lm(
    init: &Pose3,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    mask: &[bool],
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    config: &TrackerConfig,
) -> (Pose3, usize) {
    let cost = |pose: &Pose3| -> f64 {
        let mut c = 0.0;
        for i in 0..points.len() {
            if mask[i] {
                match whitened_error(pose, &points[i], &pixels[i], k, omega) {
                    Some(e2) => c += huber(e2, config.huber_delta).0,
                    // Behind the camera: a fixed penalty keeps the cost finite.
                    None => c += 2.0 * config.huber_delta * 1e3,
                }
            }
        }
        c
    };
    let mut pose = *init;
    let mut c = cost(&pose);
    let mut lambda: Option<f64> = None;
    let mut iters = 0;
    while iters < config.max_iterations && c > 0.0 {
        iters += 1;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for i in 0..points.len() {
            if !mask[i] {
                continue;
            }
            let Some((r, jp, _)) = reprojection_jacobians(&pose, &points[i], &pixels[i], k) else { continue };
            if pose.transform_point(&points[i]).z < k.min_depth {
                continue;
            }
            let (_, w) = huber((r.transpose() * omega.omega_vis * r)[0], config.huber_delta);
            let wo = omega.omega_vis * w;
            h += jp.transpose() * wo * jp;
            g += jp.transpose() * wo * r;
        }
        let mut lam = lambda.unwrap_or_else(|| 1e-4 * h.diagonal().max().max(1e-12));
        let mut accepted = None;
        while lam <= 1e12 {
            let damped = h + Matrix6::identity() * lam;
            if let Some(ch) = damped.cholesky() {
                let d = ch.solve(&-g);
                let cand = exp_se3(&Twist6::from_vector(&d)).compose(&pose).renormalized();
                let cc = cost(&cand);
                if cc <= c {
                    accepted = Some((cand, cc));
                    break;
                }
            }
            lam *= 10.0;
        }
        let Some((cand, cc)) = accepted else { break };
        lambda = Some(lam / 3.0);
        let decrease = (c - cc) / c;
        pose = cand;
        c = cc;
        if decrease < 1e-10 {
            break;
        }
    }
    (pose, iters)
}

/// Pose-only refinement with landmarks fixed: a robust pass over all
/// matches, inlier classification, then a second pass on the inliers.
pub fn optimize_pose(
    init: &Pose3,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    config: &TrackerConfig,
) -> PoseFit {
    let classify = |pose: &Pose3| -> Vec<bool> {
        points
            .iter()
            .zip(pixels)
            .map(|(p, px)| whitened_error(pose, p, px, k, omega).is_some_and(|e2| e2 <= config.chi2_gate))
            .collect()
    };
    let all = vec![true; points.len()];
    let (pose, it1) = pose_lm(init, points, pixels, &all, k, omega, config);
    let mask = classify(&pose);
    let (pose, it2) =
        if mask.iter().any(|m| *m) { pose_lm(&pose, points, pixels, &mask, k, omega, config) } else { (pose, 0) };
    let inliers = classify(&pose);
    let n_inliers = inliers.iter().filter(|m| **m).count();
    PoseFit { pose, inliers, n_inliers, iterations: it1 + it2 }
}

/// Landmarks of `kfs` matched to the frame's observations by feature id.
pub fn match_local_map(
    map: &MapState,
    kfs: &BTreeSet<KeyframeId>,
    frame: &Frame,
    predicted: &Pose3,
    k: &CameraIntrinsics,
    search_radius: Option<f64>,
) -> Vec<(FeatureId, LandmarkId, Vector2<f64>)> {
    let local = map.landmarks_by_feature(kfs.iter());
    let mut out = Vec::new();
    for obs in &frame.observations {
        let Some(lm) = local.get(&obs.id) else { continue };
        let pc = predicted.transform_point(&map.landmarks[lm].position);
        if pc.z < k.min_depth {
            continue;
        }
        if let Some(radius) = search_radius {
            let proj = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            if (proj - obs.pixel).norm() > radius {
                continue;
            }
        }
        out.push((obs.id, *lm, obs.pixel));
    }
    out
}

/// Result of fitting a pose against a set of matches.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPose {
    pub pose: Pose3,
    pub inliers: BTreeMap<FeatureId, LandmarkId>,
}

pub fn fit_matches(
    map: &MapState,
    matches: &[(FeatureId, LandmarkId, Vector2<f64>)],
    seed: &Pose3,
    ctx: &TrackingContext,
) -> MatchedPose {
    let points: Vec<Vector3<f64>> = matches.iter().map(|(_, l, _)| map.landmarks[l].position).collect();
    let pixels: Vec<Vector2<f64>> = matches.iter().map(|(_, _, px)| *px).collect();
    let fit = optimize_pose(seed, &points, &pixels, ctx.k, ctx.omega, ctx.config);
    let inliers = matches.iter().zip(&fit.inliers).filter(|(_, m)| **m).map(|((f, l, _), _)| (*f, *l)).collect();
    MatchedPose { pose: fit.pose, inliers }
}

/// Keyframe observing the most of the given landmarks; ties go to the newest.
pub fn reference_keyframe(map: &MapState, tracked: &BTreeMap<FeatureId, LandmarkId>) -> Option<KeyframeId> {
    let mut votes: BTreeMap<KeyframeId, usize> = BTreeMap::new();
    for lm in tracked.values() {
        if let Some(l) = map.landmarks.get(lm) {
            for kf in &l.observers {
                *votes.entry(*kf).or_insert(0) += 1;
            }
        }
    }
    votes.into_iter().max_by_key(|(kf, n)| (*n, *kf)).map(|(kf, _)| kf)
}

/// Tracks one frame against the local map around the reference keyframe.
///
/// Never fails: when too few inliers remain the pose is the odometry
/// prediction and the status is `OdometryOnly` (or `Lost` if fallback is not
/// allowed yet).
pub fn track_frame(map: &MapState, frame: &Frame, prev: &TrackState, ctx: &TrackingContext) -> TrackState {
    let prev_pose = if prev.status == TrackStatus::TrackingVisual { prev.corrected_pose(map) } else { prev.t_cw };
    let predicted =
        predict_from_odometry(&prev_pose, &prev.odom_t_ob, &frame.odometry_pose, ctx.t_bc, ctx.units_per_meter);
    let mut next = TrackState {
        status: if ctx.allow_fallback { TrackStatus::OdometryOnly } else { TrackStatus::Lost },
        t_cw: predicted,
        inlier_count: 0,
        timestamp: frame.timestamp,
        odom_t_ob: frame.odometry_pose,
        reference: prev.reference,
        tracked: BTreeMap::new(),
    };
    let Some(reference) = prev.reference.map(|r| r.0).filter(|r| map.keyframes.contains_key(r)) else {
        return next;
    };
    let local_kfs = map.neighborhood(reference, ctx.config.local_map_hops);
    let matches = match_local_map(map, &local_kfs, frame, &predicted, ctx.k, Some(ctx.config.search_radius_px));
    if matches.len() < ctx.config.min_inliers {
        return next;
    }
    let fit = fit_matches(map, &matches, &predicted, ctx);
    if fit.inliers.len() >= ctx.config.min_inliers {
        next.status = TrackStatus::TrackingVisual;
        next.t_cw = fit.pose;
        next.inlier_count = fit.inliers.len();
        next.reference = reference_keyframe(map, &fit.inliers).map(|id| (id, map.keyframes[&id].t_cw));
        next.tracked = fit.inliers;
    }
    next
}

/// Whether a successfully tracked frame should become a keyframe.
pub fn decide_keyframe(state: &TrackState, map: &MapState, policy: &KeyframePolicy) -> bool {
    if state.status != TrackStatus::TrackingVisual {
        return false;
    }
    let Some(last) = map.keyframes.values().next_back() else { return true };
    let moved = (state.odom_t_ob.translation() - last.odom_t_ob.translation()).norm();
    let turned = state.t_cw.compose(&last.t_cw.inverse()).rotation_angle();
    let ratio =
        if last.associations.is_empty() { 0.0 } else { state.tracked.len() as f64 / last.associations.len() as f64 };
    moved > policy.max_translation || turned > policy.max_rotation || ratio < policy.min_tracked_ratio
}

/// One row of the per-frame tracking log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t: f64,
    pub status: String,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl TrackingRow {
    pub fn new(t: f64, status: TrackStatus, t_cw: &Pose3) -> Self {
        let [tx, ty, tz, qx, qy, qz, qw] = t_cw.to_array7();
        Self { t, status: status.as_str().to_string(), tx, ty, tz, qx, qy, qz, qw }
    }

    pub fn pose(&self) -> Pose3 {
        Pose3::from_array7([self.tx, self.ty, self.tz, self.qx, self.qy, self.qz, self.qw]).unwrap_or_default()
    }

    pub fn status(&self) -> Option<TrackStatus> {
        self.status.parse().ok()
    }
}

pub fn write_tracking_log(path: &Path, rows: &[TrackingRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn read_tracking_log(path: &Path) -> io::Result<Vec<TrackingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(io::Error::other)).collect()
}
