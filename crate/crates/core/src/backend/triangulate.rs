use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::map::MapState;
use super::residuals::InformationMatrices;
use crate::frontend::KeyframeId;
use crate::geometry::{projection_jacobian, CameraIntrinsics, Pose3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    /// Covisible keyframes searched for a second view.
    pub max_candidates: usize,
    /// Minimum angle between the two viewing rays, degrees.
    pub min_parallax_deg: f64,
    pub chi2_gate: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { max_candidates: 15, min_parallax_deg: 1.0, chi2_gate: 5.99 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangulationStats {
    /// Observations attached to landmarks that were already mapped.
    pub associated: usize,
    pub created: usize,
    pub rejected: usize,
}

/// Closest point between two rays `c + s·d`, or `None` when they are
/// parallel or meet behind either origin.
pub fn triangulate_midpoint(
    c1: &Vector3<f64>,
    d1: &Vector3<f64>,
    c2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let w0 = c1 - c2;
    let (a, b, c) = (d1.dot(d1), d1.dot(d2), d2.dot(d2));
    let (d, e) = (d1.dot(&w0), d2.dot(&w0));
    let denom = a * c - b * b;
    if denom.abs() < 1e-12 * a * c {
        return None;
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    (s > 0.0 && t > 0.0).then(|| 0.5 * ((c1 + d1 * s) + (c2 + d2 * t)))
}

/// Gauss-Newton refinement of a point's position over its observations.
pub fn refine_point(
    mut p: Vector3<f64>,
    views: &[(Pose3, Vector2<f64>)],
    k: &CameraIntrinsics,
) -> Option<Vector3<f64>> {
    for _ in 0..10 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (t_cw, px) in views {
            let pc = t_cw.transform_point(&p);
            if pc.z <= k.min_depth {
                return None;
            }
            let r = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px;
            let j = projection_jacobian(&pc, k) * t_cw.rotation_matrix();
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let step = h.cholesky()?.solve(&-g);
        p += step;
        if step.norm() < 1e-12 * p.norm().max(1.0) {
            break;
        }
    }
    p.iter().all(|v| v.is_finite()).then_some(p)
}

fn within_gate(
    t_cw: &Pose3,
    p: &Vector3<f64>,
    px: &Vector2<f64>,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    gate: f64,
) -> bool {
    let pc = t_cw.transform_point(p);
    if pc.z < k.min_depth || pc.z > k.max_depth {
        return false;
    }
    let r = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px;
    (r.transpose() * omega.omega_vis * r)[0] <= gate
}

/// Viewing ray of a pixel in the world frame: (camera center, unit direction).
fn world_ray(t_cw: &Pose3, px: &Vector2<f64>, k: &CameraIntrinsics) -> (Vector3<f64>, Vector3<f64>) {
    let t_wc = t_cw.inverse();
    (*t_wc.translation(), (t_wc.rotation_matrix() * k.bearing(px)).normalize())
}

/// Attaches or creates landmarks for the unassociated observations of `new_kf`.
///
/// An observation whose feature is already mapped in the local neighborhood is
/// attached when the landmark reprojects within the gate. Otherwise it is
/// triangulated against the covisible keyframe giving the widest ray angle and
/// refined; the point is kept only if every observer passes the gate.
pub fn triangulate_new_points(
    map: &mut MapState,
    new_kf: KeyframeId,
    k: &CameraIntrinsics,
    omega: &InformationMatrices,
    config: &TriangulationConfig,
) -> TriangulationStats {
    let mut stats = TriangulationStats::default();
    if !map.keyframes.contains_key(&new_kf) {
        return stats;
    }
    map.rebuild_covisibility();
    let mut weighted: Vec<(u32, KeyframeId)> =
        map.neighbors(new_kf, 1).into_iter().map(|n| (map.covisibility_weight(new_kf, n), n)).collect();
    weighted.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut candidates: Vec<KeyframeId> = weighted.into_iter().take(config.max_candidates).map(|(_, n)| n).collect();
    if let Some(p) = map.odometry_predecessor(new_kf) {
        if !candidates.contains(&p) {
            candidates.push(p);
        }
    }
    let mut local_kfs = map.neighborhood(new_kf, 1);
    local_kfs.extend(candidates.iter().copied());
    let local = map.landmarks_by_feature(local_kfs.iter());

    let kf = map.keyframes[&new_kf].clone();
    let min_parallax = config.min_parallax_deg.to_radians();
    for obs in &kf.observations {
        if kf.associations.contains_key(&obs.id) {
            continue;
        }
        if let Some(lm) = local.get(&obs.id) {
            let pos = map.landmarks[lm].position;
            if within_gate(&kf.t_cw, &pos, &obs.pixel, k, omega, config.chi2_gate) {
                map.associate(new_kf, obs.id, *lm);
                stats.associated += 1;
                continue;
            }
        }
        let (c_new, d_new) = world_ray(&kf.t_cw, &obs.pixel, k);
        let mut best: Option<(f64, KeyframeId, Vector2<f64>)> = None;
        let mut others = Vec::new();
        for cand in &candidates {
            let ck = &map.keyframes[cand];
            if ck.associations.contains_key(&obs.id) {
                continue;
            }
            let Some(px) = ck.pixel(obs.id) else { continue };
            let (_, d) = world_ray(&ck.t_cw, &px, k);
            let angle = d_new.dot(&d).clamp(-1.0, 1.0).acos();
            others.push((*cand, px));
            if best.is_none_or(|b| angle > b.0) {
                best = Some((angle, *cand, px));
            }
        }
        let Some((angle, partner, partner_px)) = best else { continue };
        if angle < min_parallax {
            stats.rejected += 1;
            continue;
        }
        let partner_pose = map.keyframes[&partner].t_cw;
        let (c_p, d_p) = world_ray(&partner_pose, &partner_px, k);
        let pair = [(kf.t_cw, obs.pixel), (partner_pose, partner_px)];
        let Some(p) = triangulate_midpoint(&c_new, &d_new, &c_p, &d_p).and_then(|p| refine_point(p, &pair, k)) else {
            stats.rejected += 1;
            continue;
        };
        if !pair.iter().all(|(t, px)| within_gate(t, &p, px, k, omega, config.chi2_gate)) {
            stats.rejected += 1;
            continue;
        }
        let mut observers = vec![(new_kf, kf.t_cw, obs.pixel), (partner, partner_pose, partner_px)];
        for (cand, px) in others {
            let pose = map.keyframes[&cand].t_cw;
            if cand != partner && within_gate(&pose, &p, &px, k, omega, config.chi2_gate) {
                observers.push((cand, pose, px));
            }
        }
        let p = if observers.len() > 2 {
            let views: Vec<(Pose3, Vector2<f64>)> = observers.iter().map(|(_, t, px)| (*t, *px)).collect();
            match refine_point(p, &views, k) {
                Some(q) if views.iter().all(|(t, px)| within_gate(t, &q, px, k, omega, config.chi2_gate)) => q,
                _ => p,
            }
        } else {
            p
        };
        let lm = map.add_landmark(obs.id, p);
        for (id, _, _) in observers {
            map.associate(id, obs.id, lm);
        }
        stats.created += 1;
    }
    map.rebuild_covisibility();
    stats
}
