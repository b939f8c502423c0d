use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use super::map::{LandmarkId, MapState};
use super::residuals::{
    odometry_camera_motion, odometry_jacobians, odometry_residual, reprojection_jacobians, InformationMatrices,
};
use crate::frontend::KeyframeId;
use crate::geometry::{exp_se3, CameraIntrinsics, Pose3, Twist6};

type Matrix6x3 = SMatrix<f64, 6, 3>;

const MAX_LAMBDA: f64 = 1e12;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("keyframe {0} not found")]
    UnknownKeyframe(KeyframeId),
    #[error("nothing to optimize")]
    NothingToOptimize,
    #[error("odometry factors need a metric map")]
    UnscaledMap,
    #[error("optimization failed ({:?})", .report.status)]
    SolveFailed { report: Box<SolveReport> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Huber threshold on the whitened visual error.
    pub huber_delta: f64,
    /// Squared whitened error above which an observation is an outlier.
    pub chi2_gate: f64,
    pub use_odometry: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            relative_tolerance: 1e-6,
            huber_delta: 5.99f64.sqrt(),
            chi2_gate: 5.99,
            use_odometry: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// No damped step lowered the cost any further.
    Stalled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub kf_id: Option<KeyframeId>,
    pub kind: SolveKind,
    pub n_active: usize,
    pub n_fixed: usize,
    pub n_landmarks: usize,
    pub n_visual: usize,
    pub n_odometry: usize,
    pub cost0: f64,
    pub cost1: f64,
    pub iters: usize,
    pub status: SolveStatus,
    /// Cost after every accepted step, starting with `cost0`.
    pub accepted_costs: Vec<f64>,
    pub outliers_removed: usize,
    pub landmarks_culled: usize,
}

/// Variables and fixed context of one bundle adjustment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalWindow {
    pub active: BTreeSet<KeyframeId>,
    pub fixed: BTreeSet<KeyframeId>,
    pub landmarks: BTreeSet<LandmarkId>,
}

/// `kf` and its covisibility neighbors with weight `>= min_weight` are active;
/// every landmark they observe is active; other observers of those landmarks
/// are fixed.
pub fn select_local_window(map: &MapState, kf: KeyframeId, min_weight: u32) -> Result<LocalWindow, BackendError> {
    if !map.keyframes.contains_key(&kf) {
        return Err(BackendError::UnknownKeyframe(kf));
    }
    let mut active = BTreeSet::from([kf]);
    active.extend(map.neighbors(kf, min_weight));
    Ok(window_from_active(map, active))
}

fn window_from_active(map: &MapState, active: BTreeSet<KeyframeId>) -> LocalWindow {
    let landmarks: BTreeSet<LandmarkId> =
        active.iter().flat_map(|k| map.keyframes[k].associations.values().copied()).collect();
    let fixed = landmarks
        .iter()
        .flat_map(|l| map.landmarks[l].observers.iter().copied())
        .filter(|k| !active.contains(k))
        .collect();
    LocalWindow { active, fixed, landmarks }
}

/// Window covering the whole map with only the anchor keyframe fixed.
pub fn global_window(map: &MapState) -> Result<LocalWindow, BackendError> {
    let anchor = map.anchor().ok_or(BackendError::NothingToOptimize)?;
    let active = map.keyframes.keys().copied().filter(|k| *k != anchor).collect();
    Ok(LocalWindow { active, fixed: BTreeSet::from([anchor]), landmarks: map.landmarks.keys().copied().collect() })
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Active(usize),
    Fixed(KeyframeId),
}

struct VisualTerm {
    cam: Slot,
    point: usize,
    pixel: nalgebra::Vector2<f64>,
}

struct OdometryTerm {
    prev: Slot,
    curr: Slot,
    rel: Pose3,
}

struct Problem<'a> {
    k: &'a CameraIntrinsics,
    omega: &'a InformationMatrices,
    huber_delta: f64,
    fixed: BTreeMap<KeyframeId, Pose3>,
    visual: Vec<VisualTerm>,
    odometry: Vec<OdometryTerm>,
    /// Landmark index -> visual term indices.
    point_terms: Vec<Vec<usize>>,
}

struct State {
    poses: Vec<Pose3>,
    points: Vec<Vector3<f64>>,
}

struct Normal {
    a: DMatrix<f64>,
    bp: DVector<f64>,
    c: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// Per landmark: (camera index, 6x3 coupling block).
    w: Vec<Vec<(usize, Matrix6x3)>>,
}

impl Problem<'_> {
    fn pose<'s>(&'s self, state: &'s State, slot: Slot) -> &'s Pose3 {
        match slot {
            Slot::Active(i) => &state.poses[i],
            Slot::Fixed(id) => &self.fixed[&id],
        }
    }

    /// Returns the robust cost for a whitened squared error and the IRLS weight.
    fn huber(&self, e2: f64) -> (f64, f64) {
        let d = self.huber_delta;
        if e2 <= d * d {
            (e2, 1.0)
        } else {
            let e = e2.sqrt();
            (2.0 * d * e - d * d, d / e)
        }
    }

    fn cost(&self, state: &State) -> Option<f64> {
        let mut total = 0.0;
        for t in &self.visual {
            let pc = self.pose(state, t.cam).transform_point(&state.points[t.point]);
            if !(pc.z > 1e-9) {
                return None;
            }
            let r = nalgebra::Vector2::new(
                self.k.fx * pc.x / pc.z + self.k.cx - t.pixel.x,
                self.k.fy * pc.y / pc.z + self.k.cy - t.pixel.y,
            );
            total += self.huber((r.transpose() * self.omega.omega_vis * r)[0]).0;
        }
        for t in &self.odometry {
            let e = odometry_residual(&t.rel, self.pose(state, t.prev), self.pose(state, t.curr)).ok()?.to_vector();
            total += (e.transpose() * self.omega.omega_odo * e)[0];
        }
        total.is_finite().then_some(total)
    }

    fn linearize(&self, state: &State) -> Option<Normal> {
        let n = state.poses.len();
        let m = state.points.len();
        let mut a = DMatrix::zeros(6 * n, 6 * n);
        let mut bp = DVector::zeros(6 * n);
        let mut c = vec![Matrix3::zeros(); m];
        let mut bl = vec![Vector3::zeros(); m];
        let mut w: Vec<Vec<(usize, Matrix6x3)>> = vec![Vec::new(); m];
        let ov = self.omega.omega_vis;
        for (l, terms) in self.point_terms.iter().enumerate() {
            for &ti in terms {
                let t = &self.visual[ti];
                let (r, jp, jl) = reprojection_jacobians(self.pose(state, t.cam), &state.points[l], &t.pixel, self.k)?;
                let (_, weight) = self.huber((r.transpose() * ov * r)[0]);
                let wo = ov * weight;
                c[l] += jl.transpose() * wo * jl;
                bl[l] += jl.transpose() * wo * r;
                if let Slot::Active(i) = t.cam {
                    let mut blk = a.fixed_view_mut::<6, 6>(6 * i, 6 * i);
                    blk += jp.transpose() * wo * jp;
                    let mut b = bp.fixed_rows_mut::<6>(6 * i);
                    b += jp.transpose() * wo * r;
                    w[l].push((i, jp.transpose() * wo * jl));
                }
            }
        }
        let oo = self.omega.omega_odo;
        for t in &self.odometry {
            let (e, j_prev, j_curr) =
                odometry_jacobians(&t.rel, self.pose(state, t.prev), self.pose(state, t.curr)).ok()?;
            let e = e.to_vector();
            let blocks: [(Slot, Matrix6<f64>); 2] = [(t.prev, j_prev), (t.curr, j_curr)];
            for (si, ji) in &blocks {
                let Slot::Active(i) = *si else { continue };
                let mut b = bp.fixed_rows_mut::<6>(6 * i);
                b += ji.transpose() * oo * e;
                for (sj, jj) in &blocks {
                    let Slot::Active(j) = *sj else { continue };
                    let mut blk = a.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    blk += ji.transpose() * oo * jj;
                }
            }
        }
        Some(Normal { a, bp, c, bl, w })
    }

    fn max_diagonal(normal: &Normal) -> f64 {
        let cams = normal.a.diagonal().iter().copied().fold(0.0, f64::max);
        normal.c.iter().flat_map(|c| [c[(0, 0)], c[(1, 1)], c[(2, 2)]]).fold(cams, f64::max)
    }

    /// Solves the damped system via the Schur complement on the cameras.
    fn solve(normal: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let n6 = normal.a.nrows();
        let mut s = normal.a.clone();
        for i in 0..n6 {
            s[(i, i)] += lambda;
        }
        let mut rhs = -normal.bp.clone();
        let mut c_inv = Vec::with_capacity(normal.c.len());
        for (l, c) in normal.c.iter().enumerate() {
            let ci = (c + Matrix3::identity() * lambda).try_inverse()?;
            for (i, wi) in &normal.w[l] {
                let wc = wi * ci;
                let mut r = rhs.fixed_rows_mut::<6>(6 * i);
                r += wc * normal.bl[l];
                for (j, wj) in &normal.w[l] {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    blk -= wc * wj.transpose();
                }
            }
            c_inv.push(ci);
        }
        let dp = if n6 > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        if dp.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let dl = normal
            .c
            .iter()
            .enumerate()
            .map(|(l, _)| {
                let mut r = -normal.bl[l];
                for (i, wi) in &normal.w[l] {
                    r -= wi.transpose() * dp.fixed_rows::<6>(6 * i);
                }
                c_inv[l] * r
            })
            .collect();
        Some((dp, dl))
    }

    fn apply(state: &State, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> State {
        let poses = state
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: Vector6<f64> = dp.fixed_rows::<6>(6 * i).into_owned();
                exp_se3(&Twist6::from_vector(&d)).compose(p).renormalized()
            })
            .collect();
        let points = state.points.iter().zip(dl).map(|(p, d)| p + d).collect();
        State { poses, points }
    }
}

/// Levenberg-Marquardt over the window's active keyframes and landmarks.
///
/// The anchor keyframe is always held fixed. Odometry factors join consecutive
/// keyframes of one odometry segment when at least one of them is active; the
/// other end is added to the fixed set if needed. On success the map is
/// updated, outlier associations are removed and weak landmarks culled. On
/// failure the map is left untouched.
pub fn bundle_adjust(
    map: &mut MapState,
    window: &LocalWindow,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    config: &BaConfig,
    kind: SolveKind,
    kf_id: Option<KeyframeId>,
) -> Result<SolveReport, BackendError> {
    if config.use_odometry && map.unscaled {
        return Err(BackendError::UnscaledMap);
    }
    for id in window.active.iter().chain(&window.fixed) {
        if !map.keyframes.contains_key(id) {
            return Err(BackendError::UnknownKeyframe(*id));
        }
    }
    let anchor = map.anchor();
    let active: Vec<KeyframeId> = window.active.iter().copied().filter(|k| Some(*k) != anchor).collect();
    let mut fixed_ids: BTreeSet<KeyframeId> = window.fixed.clone();
    if let Some(a) = anchor.filter(|a| window.active.contains(a)) {
        fixed_ids.insert(a);
    }
    let index: BTreeMap<KeyframeId, usize> = active.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let landmark_ids: Vec<LandmarkId> =
        window.landmarks.iter().copied().filter(|l| map.landmarks.contains_key(l)).collect();

    let mut odometry = Vec::new();
    if config.use_odometry {
        let mut pairs = BTreeSet::new();
        for &kf in &active {
            if let Some(p) = map.odometry_predecessor(kf) {
                pairs.insert((p, kf));
            }
            if let Some(s) = map.odometry_successor(kf) {
                pairs.insert((kf, s));
            }
        }
        for (p, c) in pairs {
            for id in [p, c] {
                if !index.contains_key(&id) {
                    fixed_ids.insert(id);
                }
            }
            let (kp, kc) = (&map.keyframes[&p], &map.keyframes[&c]);
            let cam_prev_curr = odometry_camera_motion(&kp.odom_t_ob, &kc.odom_t_ob, &map.t_bc);
            // The factor compares against t_cw_prev * inverse(t_cw_curr) = T_{C_prev C_curr}.
            odometry.push(OdometryTerm { prev: slot(&index, p), curr: slot(&index, c), rel: cam_prev_curr });
        }
    }

    let mut visual = Vec::new();
    let mut point_terms = vec![Vec::new(); landmark_ids.len()];
    let mut excluded = 0usize;
    for (li, lid) in landmark_ids.iter().enumerate() {
        let l = &map.landmarks[lid];
        for obs in &l.observers {
            let kf = &map.keyframes[obs];
            let Some(pixel) = kf.pixel(l.feature) else { continue };
            if kf.t_cw.transform_point(&l.position).z < k.min_depth {
                excluded += 1;
                continue;
            }
            if !index.contains_key(obs) {
                fixed_ids.insert(*obs);
            }
            point_terms[li].push(visual.len());
            visual.push(VisualTerm { cam: slot(&index, *obs), point: li, pixel });
        }
    }
    if excluded > 0 {
        debug!("bundle adjustment skipped {excluded} observations behind the camera");
    }

    let mut report = SolveReport {
        kf_id,
        kind,
        n_active: active.len(),
        n_fixed: fixed_ids.len(),
        n_landmarks: landmark_ids.len(),
        n_visual: visual.len(),
        n_odometry: odometry.len(),
        cost0: 0.0,
        cost1: 0.0,
        iters: 0,
        status: SolveStatus::Converged,
        accepted_costs: Vec::new(),
        outliers_removed: 0,
        landmarks_culled: 0,
    };
    if active.is_empty() && landmark_ids.is_empty() {
        return Err(BackendError::NothingToOptimize);
    }

    let problem = Problem {
        k,
        omega,
        huber_delta: config.huber_delta,
        fixed: fixed_ids.iter().map(|id| (*id, map.keyframes[id].t_cw)).collect(),
        visual,
        odometry,
        point_terms,
    };
    let mut state = State {
        poses: active.iter().map(|id| map.keyframes[id].t_cw).collect(),
        points: landmark_ids.iter().map(|id| map.landmarks[id].position).collect(),
    };

    let Some(cost0) = problem.cost(&state) else {
        report.status = SolveStatus::Failed;
        return Err(BackendError::SolveFailed { report: Box::new(report) });
    };
    report.cost0 = cost0;
    report.cost1 = cost0;
    report.accepted_costs.push(cost0);

    let mut cost = cost0;
    let mut lambda = None;
    let mut status = SolveStatus::MaxIterations;
    if cost0 == 0.0 {
        status = SolveStatus::Converged;
    } else {
        for _ in 0..config.max_iterations {
            report.iters += 1;
            let Some(normal) = problem.linearize(&state) else {
                status = SolveStatus::Failed;
                break;
            };
            let mut lam = lambda.unwrap_or_else(|| 1e-4 * Problem::max_diagonal(&normal).max(1e-12));
            let mut accepted = None;
            while lam <= MAX_LAMBDA {
                if let Some((dp, dl)) = Problem::solve(&normal, lam) {
                    let candidate = Problem::apply(&state, &dp, &dl);
                    if let Some(c) = problem.cost(&candidate) {
                        if c <= cost {
                            accepted = Some((candidate, c));
                            break;
                        }
                    }
                }
                lam *= 10.0;
            }
            let Some((next, c)) = accepted else {
                status = SolveStatus::Stalled;
                break;
            };
            lambda = Some(lam / 3.0);
            let decrease = (cost - c) / cost;
            state = next;
            cost = c;
            report.accepted_costs.push(c);
            if c == 0.0 || decrease < config.relative_tolerance {
                status = SolveStatus::Converged;
                break;
            }
        }
    }
    report.cost1 = cost;
    report.status = status;
    if status == SolveStatus::Failed {
        warn!("bundle adjustment failed after {} iterations", report.iters);
        return Err(BackendError::SolveFailed { report: Box::new(report) });
    }

    for (id, pose) in active.iter().zip(&state.poses) {
        map.keyframes.get_mut(id).expect("active keyframe").t_cw = *pose;
    }
    for (id, p) in landmark_ids.iter().zip(&state.points) {
        map.landmarks.get_mut(id).expect("active landmark").position = *p;
    }
    report.outliers_removed = remove_outliers(map, &window.landmarks, k, omega, config.chi2_gate);
    report.landmarks_culled = map.cull_landmarks();
    map.rebuild_covisibility();
    debug!(
        "{kind:?} BA: {} active, {} fixed, cost {:.3} -> {:.3} in {} iterations",
        report.n_active, report.n_fixed, report.cost0, report.cost1, report.iters
    );
    Ok(report)
}

fn slot(index: &BTreeMap<KeyframeId, usize>, id: KeyframeId) -> Slot {
    index.get(&id).map_or(Slot::Fixed(id), |i| Slot::Active(*i))
}

/// Bundle adjustment over every keyframe with the anchor fixed.
pub fn global_bundle_adjust(
    map: &mut MapState,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    config: &BaConfig,
) -> Result<SolveReport, BackendError> {
    let window = global_window(map)?;
    bundle_adjust(map, &window, k, omega, config, SolveKind::Global, None)
}

/// Drops associations whose whitened squared reprojection error exceeds `gate`
/// or whose point lies behind the camera. Returns how many were dropped.
pub fn remove_outliers(
    map: &mut MapState,
    landmarks: &BTreeSet<LandmarkId>,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    gate: f64,
) -> usize {
    let mut drop = Vec::new();
    for lid in landmarks {
        let Some(l) = map.landmarks.get(lid) else { continue };
        for kf in &l.observers {
            let key = &map.keyframes[kf];
            let Some(px) = key.pixel(l.feature) else { continue };
            let pc = key.t_cw.transform_point(&l.position);
            let bad = if pc.z < k.min_depth {
                true
            } else {
                let r = nalgebra::Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px;
                (r.transpose() * omega.omega_vis * r)[0] > gate
            };
            if bad {
                drop.push((*kf, *lid));
            }
        }
    }
    for (kf, lid) in &drop {
        map.dissociate(*kf, *lid);
    }
    drop.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Keyframe;
    use crate::simworld::Observation;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cameras along a line looking at a cloud of points, with exact observations.
    pub(crate) fn synthetic_map(n_kf: usize, n_pts: usize, seed: u64) -> (MapState, Vec<Pose3>, Vec<Vector3<f64>>) {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vector3<f64>> = (0..n_pts)
            .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(4.0..8.0)))
            .collect();
        let mut map = MapState::new();
        let t_bc = crate::simworld::default_t_bc();
        map.t_bc = t_bc;
        let mut truth = Vec::new();
        for i in 0..n_kf {
            let c = Vector3::new(0.2 * i as f64, 0.02 * (i as f64).sin(), 0.0);
            let rot = nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.03 * i as f64, 0.0);
            let t_wc = Pose3::new(rot, c);
            let t_cw = t_wc.inverse();
            let obs: Vec<Observation> = points
                .iter()
                .enumerate()
                .filter_map(|(j, p)| {
                    let pr = crate::geometry::project_point(&t_cw.transform_point(p), &k).ok()?;
                    pr.in_bounds.then_some(Observation { id: j as u64, pixel: pr.pixel })
                })
                .collect();
            // Body poses consistent with the camera poses through t_bc.
            let odom = t_wc.compose(&t_bc.inverse());
            map.insert_keyframe(Keyframe::new(t_cw, odom, obs, i as f64, 0));
            truth.push(t_cw);
        }
        for (j, p) in points.iter().enumerate() {
            let lm = map.add_landmark(j as u64, *p);
            let kfs: Vec<KeyframeId> = map.keyframes.keys().copied().collect();
            for kf in kfs {
                map.associate(kf, j as u64, lm);
            }
        }
        map.cull_landmarks();
        map.rebuild_covisibility();
        (map, truth, points)
    }

    fn info() -> InformationMatrices {
        InformationMatrices::from_sigmas(1.0, 0.01, 0.005)
    }

    #[test]
    fn window_examples() {
        let k_single = {
            let mut m = MapState::new();
            let id = m.insert_keyframe(Keyframe::new(Pose3::identity(), Pose3::identity(), vec![], 0.0, 0));
            let w = select_local_window(&m, id, 15).unwrap();
            (w.active, w.fixed, id)
        };
        assert_eq!(k_single.0, BTreeSet::from([k_single.2]));
        assert!(k_single.1.is_empty());

        let (map, _, _) = synthetic_map(2, 40, 1);
        let w = select_local_window(&map, 1, 15).unwrap();
        assert!(map.covisibility_weight(0, 1) >= 20);
        assert_eq!(w.active, BTreeSet::from([0, 1]));
        assert!(matches!(select_local_window(&map, 99, 15), Err(BackendError::UnknownKeyframe(99))));
    }

    #[test]
    fn window_fixed_set_matches_brute_force() {
        // kf0-kf1 share {1,2}; kf1-kf2 share {11..=20}, below the window weight.
        let mk = |ids: Vec<u64>| {
            let obs = ids.into_iter().map(|id| Observation { id, pixel: Vector2::new(1.0, 1.0) }).collect();
            Keyframe::new(Pose3::identity(), Pose3::identity(), obs, 0.0, 0)
        };
        for shared_with_kf0 in [false, true] {
            let mut m = MapState::new();
            let mut f0: Vec<u64> = vec![1, 2];
            if shared_with_kf0 {
                f0.push(11);
            }
            let a = m.insert_keyframe(mk(f0.clone()));
            let b = m.insert_keyframe(mk((1..=20).collect()));
            let c = m.insert_keyframe(mk((11..=20).collect()));
            for f in 1..=20u64 {
                let l = m.add_landmark(f, Vector3::zeros());
                for kf in [a, b, c] {
                    m.associate(kf, f, l);
                }
            }
            m.rebuild_covisibility();
            let w = select_local_window(&m, c, 15).unwrap();
            // Brute force: active landmarks are those any active kf observes.
            let active_lms: BTreeSet<_> = m
                .landmarks
                .values()
                .filter(|l| l.observers.iter().any(|o| w.active.contains(o)))
                .map(|l| l.id)
                .collect();
            let expect_fixed: BTreeSet<_> = m
                .keyframes
                .keys()
                .copied()
                .filter(|kf| !w.active.contains(kf))
                .filter(|kf| active_lms.iter().any(|l| m.landmarks[l].observers.contains(kf)))
                .collect();
            assert_eq!(w.landmarks, active_lms);
            assert_eq!(w.fixed, expect_fixed);
            assert_eq!(w.active, BTreeSet::from([c]));
            assert!(w.fixed.contains(&b));
            assert_eq!(w.fixed.contains(&a), shared_with_kf0);
        }
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (mut map, _, _) = synthetic_map(5, 60, 2);
        let k = CameraIntrinsics::default();
        let cfg = BaConfig::default();
        let r = global_bundle_adjust(&mut map, &k, &info(), &cfg).unwrap();
        assert!(r.cost0 < 1e-12, "{}", r.cost0);
        assert!(r.cost1 <= r.cost0);
    }

    #[test]
    fn exactly_zero_cost_returns_without_iterating() {
        let mut map = MapState::new();
        let k = CameraIntrinsics::default();
        let p = Vector3::new(0.0, 0.0, 5.0);
        let px = crate::geometry::project_point(&p, &k).unwrap().pixel;
        for _ in 0..2 {
            map.insert_keyframe(Keyframe::new(
                Pose3::identity(),
                Pose3::identity(),
                vec![Observation { id: 0, pixel: px }],
                0.0,
                0,
            ));
        }
        let l = map.add_landmark(0, p);
        map.associate(0, 0, l);
        map.associate(1, 0, l);
        let r = global_bundle_adjust(&mut map, &k, &info(), &BaConfig::default()).unwrap();
        assert_eq!(r.iters, 0);
        assert_eq!(r.cost1, 0.0);
    }

    #[test]
    fn perturbed_poses_converge_to_truth() {
        let (mut map, truth, points) = synthetic_map(6, 80, 3);
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for (id, kf) in map.keyframes.iter_mut() {
            if *id == 0 {
                continue;
            }
            let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize()
                * 0.05;
            kf.t_cw = Pose3::from_translation(d).compose(&kf.t_cw);
        }
        let cfg = BaConfig { max_iterations: 50, relative_tolerance: 1e-12, ..BaConfig::default() };
        let r = global_bundle_adjust(&mut map, &k, &info(), &cfg).unwrap();
        for w in r.accepted_costs.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for (id, t) in truth.iter().enumerate() {
            let est = &map.keyframes[&(id as u64)].t_cw;
            let err = (est.inverse().translation() - t.inverse().translation()).norm();
            assert!(err < 1e-6, "kf {id}: {err}");
        }
        for l in map.landmarks.values() {
            assert!((l.position - points[l.feature as usize]).norm() < 1e-6);
        }
    }

    #[test]
    fn fixed_keyframes_are_bit_identical() {
        let (mut map, _, _) = synthetic_map(6, 80, 4);
        for kf in map.keyframes.values_mut() {
            kf.t_cw = Pose3::from_translation(Vector3::new(0.01, -0.02, 0.03)).compose(&kf.t_cw);
        }
        let before = map.clone();
        let k = CameraIntrinsics::default();
        let window = select_local_window(&map, 5, 10_000).unwrap();
        assert!(!window.fixed.is_empty());
        bundle_adjust(&mut map, &window, &k, &info(), &BaConfig::default(), SolveKind::Local, Some(5)).unwrap();
        for id in window.fixed.iter().chain([&0]) {
            assert_eq!(map.keyframes[id].t_cw.to_array7(), before.keyframes[id].t_cw.to_array7());
        }
    }

    #[test]
    fn odometry_factors_need_a_metric_map() {
        let (mut map, _, _) = synthetic_map(3, 40, 5);
        map.unscaled = true;
        let before = map.clone();
        let k = CameraIntrinsics::default();
        let err = global_bundle_adjust(&mut map, &k, &info(), &BaConfig::default()).unwrap_err();
        assert!(matches!(err, BackendError::UnscaledMap));
        assert_eq!(map, before);
    }

    #[test]
    fn odometry_bridges_a_featureless_gap() {
        // Keyframes 2 and 3 see nothing; only odometry constrains them.
        let (mut map, truth, _) = synthetic_map(6, 80, 6);
        for id in [2u64, 3] {
            let lms: Vec<LandmarkId> = map.keyframes[&id].associations.values().copied().collect();
            for l in lms {
                map.dissociate(id, l);
            }
        }
        map.rebuild_covisibility();
        for id in [2u64, 3] {
            let kf = map.keyframes.get_mut(&id).unwrap();
            kf.t_cw = Pose3::from_translation(Vector3::new(0.05, 0.0, -0.04)).compose(&kf.t_cw);
        }
        let k = CameraIntrinsics::default();
        let r = global_bundle_adjust(&mut map, &k, &info(), &BaConfig::default()).unwrap();
        assert!(r.n_odometry >= 5);
        // Odometry-integration oracle: relative motion from odometry equals
        // the estimate's relative motion.
        for (a, b) in [(1u64, 2u64), (2, 3), (3, 4)] {
            let (ka, kb) = (&map.keyframes[&a], &map.keyframes[&b]);
            let odo = odometry_camera_motion(&ka.odom_t_ob, &kb.odom_t_ob, &map.t_bc);
            let est = ka.t_cw.compose(&kb.t_cw.inverse());
            assert!(odo.max_abs_diff(&est) < 1e-5, "{a}-{b}: {}", odo.max_abs_diff(&est));
            let truth_rel = truth[a as usize].compose(&truth[b as usize].inverse());
            assert!(truth_rel.max_abs_diff(&est) < 1e-5);
        }
    }
}
