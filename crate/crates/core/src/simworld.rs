//! Synthetic ground truth: landmark fields, planar robot trajectories,
//! noisy pixel observations with ideal data association, and wheel odometry
//! that drifts with distance travelled.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use thiserror::Error;

use crate::geometry::{project_point, CameraIntrinsics, GeometryError, Pose2, Pose3};

pub const SIM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unsupported sim_version {0}")]
    Version(u32),
    #[error("run file: {0}")]
    Io(#[from] std::io::Error),
    #[error("run file: {0}")]
    Json(#[from] serde_json::Error),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Config(msg.into()))
}

/// Identifier of a physical landmark. Observations carry it, standing in for
/// descriptor matching.
pub type FeatureId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min.x && x <= self.max.x && y >= self.min.y && y <= self.max.y
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldLandmark {
    pub id: FeatureId,
    pub xyz: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub name: String,
    pub extent: Bounds,
    pub landmarks: Vec<WorldLandmark>,
}

/// Axis-aligned box of landmarks (furniture).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub center: [f64; 3],
    pub half_size: [f64; 3],
    pub count: usize,
}

/// Vertical cylinder of landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PillarConfig {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub name: String,
    /// Room size in meters; the room spans `[0, size]` on each axis.
    pub size: [f64; 3],
    pub wall_landmarks: usize,
    pub wall_height: [f64; 2],
    #[serde(default)]
    pub clusters: Vec<ClusterConfig>,
    #[serde(default)]
    pub pillars: Vec<PillarConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lab,
    Hall,
}

impl std::str::FromStr for Preset {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "lab" => Ok(Preset::Lab),
            "hall" => Ok(Preset::Hall),
            other => config_err(format!("unknown preset '{other}' (expected lab or hall)")),
        }
    }
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Lab => "lab",
            Preset::Hall => "hall",
        }
    }

    pub fn world_config(&self, seed: u64) -> WorldConfig {
        match self {
            // 10 x 9 m, feature-rich: dense walls plus furniture.
            Preset::Lab => WorldConfig {
                name: "lab".into(),
                size: [10.0, 9.0, 3.0],
                wall_landmarks: 1200,
                wall_height: [0.3, 2.7],
                clusters: vec![
                    ClusterConfig { center: [1.3, 2.0, 0.8], half_size: [0.4, 0.7, 0.2], count: 60 },
                    ClusterConfig { center: [8.7, 6.5, 0.8], half_size: [0.4, 0.7, 0.2], count: 60 },
                    ClusterConfig { center: [3.0, 7.7, 0.8], half_size: [0.7, 0.4, 0.2], count: 60 },
                    ClusterConfig { center: [7.0, 1.3, 0.8], half_size: [0.7, 0.4, 0.2], count: 60 },
                ],
                pillars: vec![],
                seed,
            },
            // 16 x 27.5 m, sparse: few wall features far away, some pillars.
            Preset::Hall => WorldConfig {
                name: "hall".into(),
                size: [16.0, 27.5, 4.0],
                wall_landmarks: 230,
                wall_height: [0.3, 3.7],
                clusters: vec![],
                pillars: vec![
                    PillarConfig { x: 5.0, y: 9.0, radius: 0.3, count: 14 },
                    PillarConfig { x: 11.0, y: 9.0, radius: 0.3, count: 14 },
                    PillarConfig { x: 5.0, y: 18.5, radius: 0.3, count: 14 },
                    PillarConfig { x: 11.0, y: 18.5, radius: 0.3, count: 14 },
                ],
                seed,
            },
        }
    }

    /// Default trajectory: an initial sideways move for triangulation, then a
    /// loop that turns the camera toward every wall and returns to the start.
    pub fn trajectory(&self) -> TrajectoryConfig {
        let w = match self {
            Preset::Lab => vec![
                [3.5, 4.5, 0.5 * PI],
                [5.5, 4.8, 0.5 * PI],
                [6.5, 4.5, 0.0],
                [6.5, 2.8, 0.0],
                [5.5, 2.1, -0.5 * PI],
                [3.5, 2.1, -0.5 * PI],
                [2.8, 3.0, -PI],
                [2.8, 4.5, -PI],
                [3.5, 4.5, -1.5 * PI],
                [5.0, 4.7, -1.5 * PI],
            ],
            Preset::Hall => vec![
                [6.0, 8.0, 0.0],
                [6.0, 10.0, 0.0],
                [6.0, 10.0, 0.5 * PI],
                [6.0, 19.0, 0.5 * PI],
                [7.0, 20.0, 0.0],
                [10.0, 20.0, 0.0],
                [10.0, 20.0, -0.5 * PI],
                [10.0, 9.0, -0.5 * PI],
                [9.0, 8.0, -PI],
                [6.5, 8.0, -PI],
                [6.0, 8.5, -2.0 * PI],
            ],
        };
        TrajectoryConfig { waypoints: w, ..TrajectoryConfig::default() }
    }
}

fn check_size(size: &[f64; 3]) -> Result<(), SimError> {
    if size.iter().any(|s| !(*s > 0.0)) {
        return config_err("world dimensions must be positive");
    }
    Ok(())
}

/// Builds the landmark field. Deterministic in `config.seed`.
pub fn build_world(config: &WorldConfig) -> Result<World, SimError> {
    check_size(&config.size)?;
    let total = config.wall_landmarks
        + config.clusters.iter().map(|c| c.count).sum::<usize>()
        + config.pillars.iter().map(|p| p.count).sum::<usize>();
    if total == 0 {
        return config_err("world must contain at least one landmark");
    }
    let [sx, sy, sz] = config.size;
    let [h0, h1] = config.wall_height;
    if !(h0 >= 0.0 && h0 < h1 && h1 <= sz) {
        return config_err("wall_height must satisfy 0 <= lo < hi <= room height");
    }
    let extent = Bounds { min: Vector3::zeros(), max: Vector3::new(sx, sy, sz) };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut landmarks = Vec::with_capacity(total);
    let push = |xyz: Vector3<f64>, lms: &mut Vec<WorldLandmark>| {
        let id = lms.len() as FeatureId;
        lms.push(WorldLandmark { id, xyz });
    };

    let perimeter = 2.0 * (sx + sy);
    for _ in 0..config.wall_landmarks {
        let s = unit.sample(&mut rng) * perimeter;
        let z = h0 + unit.sample(&mut rng) * (h1 - h0);
        let (x, y) = if s < sx {
            (s, 0.0)
        } else if s < sx + sy {
            (sx, s - sx)
        } else if s < 2.0 * sx + sy {
            (2.0 * sx + sy - s, sy)
        } else {
            (0.0, perimeter - s)
        };
        push(Vector3::new(x, y, z), &mut landmarks);
    }
    for c in &config.clusters {
        for _ in 0..c.count {
            let p = Vector3::from_fn(|i, _| c.center[i] + (2.0 * unit.sample(&mut rng) - 1.0) * c.half_size[i]);
            if !extent.contains(&p) {
                return config_err("cluster extends outside the room");
            }
            push(p, &mut landmarks);
        }
    }
    for p in &config.pillars {
        for _ in 0..p.count {
            let a = unit.sample(&mut rng) * 2.0 * PI;
            let z = h0 + unit.sample(&mut rng) * (h1 - h0);
            let q = Vector3::new(p.x + p.radius * a.cos(), p.y + p.radius * a.sin(), z);
            if !extent.contains(&q) {
                return config_err("pillar extends outside the room");
            }
            push(q, &mut landmarks);
        }
    }
    Ok(World { name: config.name.clone(), extent, landmarks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Planar waypoints `[x, y, yaw]`. Yaw is not wrapped, so consecutive
    /// waypoints may encode turns larger than π.
    pub waypoints: Vec<[f64; 3]>,
    pub max_linear_velocity: f64,
    pub max_angular_velocity: f64,
    pub linear_acceleration: f64,
    pub angular_acceleration: f64,
    pub rate_hz: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            waypoints: vec![],
            max_linear_velocity: 0.3,
            max_angular_velocity: 0.4,
            linear_acceleration: 0.3,
            angular_acceleration: 0.5,
            rate_hz: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    #[serde(rename = "t")]
    pub timestamp: f64,
    /// Body pose in the world frame.
    #[serde(rename = "pose")]
    pub body_pose: Pose3,
}

/// Segment duration under the symmetric three-phase trapezoid used by
/// [`trapezoid_progress`]: peak rate 1.5/T, acceleration 4.5/T².
fn segment_duration(dist: f64, angle: f64, cfg: &TrajectoryConfig) -> f64 {
    let t_lin = (1.5 * dist / cfg.max_linear_velocity).max((4.5 * dist / cfg.linear_acceleration).sqrt());
    let t_ang = (1.5 * angle / cfg.max_angular_velocity).max((4.5 * angle / cfg.angular_acceleration).sqrt());
    t_lin.max(t_ang)
}

/// Normalized progress in `[0, 1]`: accelerate, cruise and decelerate for a
/// third of the segment each.
fn trapezoid_progress(tau: f64) -> f64 {
    let tau = tau.clamp(0.0, 1.0);
    if tau < 1.0 / 3.0 {
        2.25 * tau * tau
    } else if tau < 2.0 / 3.0 {
        0.25 + 1.5 * (tau - 1.0 / 3.0)
    } else {
        let r = 1.0 - tau;
        1.0 - 2.25 * r * r
    }
}

/// Samples the waypoint path at `rate_hz`, starting at t = 0.
pub fn generate_trajectory(cfg: &TrajectoryConfig) -> Result<Vec<GroundTruthSample>, SimError> {
    if cfg.waypoints.len() < 2 {
        return config_err("trajectory needs at least two waypoints");
    }
    let positive = [
        cfg.max_linear_velocity,
        cfg.max_angular_velocity,
        cfg.linear_acceleration,
        cfg.angular_acceleration,
        cfg.rate_hz,
    ];
    if positive.iter().any(|v| !(*v > 0.0)) {
        return config_err("trajectory velocities, accelerations and rate must be positive");
    }
    let mut seg_end = Vec::with_capacity(cfg.waypoints.len() - 1);
    let mut total = 0.0;
    for w in cfg.waypoints.windows(2) {
        let dist = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        let angle = (w[1][2] - w[0][2]).abs();
        total += segment_duration(dist, angle, cfg);
        seg_end.push(total);
    }
    let n = (total * cfg.rate_hz).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let t = k as f64 / cfg.rate_hz;
        while seg + 1 < seg_end.len() && t > seg_end[seg] {
            seg += 1;
        }
        let start = if seg == 0 { 0.0 } else { seg_end[seg - 1] };
        let dur = seg_end[seg] - start;
        let s = if dur > 0.0 { trapezoid_progress((t - start) / dur) } else { 1.0 };
        let (a, b) = (cfg.waypoints[seg], cfg.waypoints[seg + 1]);
        let lerp = |i: usize| a[i] + s * (b[i] - a[i]);
        out.push(GroundTruthSample { timestamp: t, body_pose: Pose3::from_planar(lerp(0), lerp(1), 0.0, lerp(2)) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Pixel noise standard deviation.
    pub pixel_sigma: f64,
    /// Odometry translation noise: standard deviation in meters accumulated
    /// over one meter of travel (random walk).
    pub odom_trans_sigma: f64,
    /// Odometry heading noise: standard deviation in radians accumulated over
    /// one radian of turning.
    pub odom_rot_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { pixel_sigma: 1.0, odom_trans_sigma: 0.02, odom_rot_sigma: 0.01, seed: 0 }
    }
}

impl NoiseModel {
    pub fn zero(seed: u64) -> Self {
        Self { pixel_sigma: 0.0, odom_trans_sigma: 0.0, odom_rot_sigma: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if [self.pixel_sigma, self.odom_trans_sigma, self.odom_rot_sigma].iter().any(|s| !(*s >= 0.0)) {
            return config_err("noise sigmas must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: FeatureId,
    pub pixel: Vector2<f64>,
}

/// One synchronized image/odometry sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "obs")]
    pub observations: Vec<Observation>,
    /// Body pose in the odometry frame at the image timestamp.
    #[serde(rename = "odom")]
    pub odometry_pose: Pose3,
    /// Set on the first frame after the robot was moved without the
    /// odometry noticing.
    #[serde(default)]
    pub discontinuity: bool,
}

/// Default body-to-camera extrinsic: camera 1.2 m above the base, 5 cm
/// forward, optical axis along body +x, image x to the robot's right.
pub fn default_t_bc() -> Pose3 {
    #[rustfmt::skip]
    let r = Matrix3::new(
        0.0,  0.0, 1.0,
       -1.0,  0.0, 0.0,
        0.0, -1.0, 0.0,
    );
    Pose3::from_rotation_matrix(&r, Vector3::new(0.05, 0.0, 1.2))
}

/// A simulated run: the world, the sensor setup and both output streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub sim_version: u32,
    pub world: World,
    pub intrinsics: CameraIntrinsics,
    pub t_bc: Pose3,
    pub noise: NoiseModel,
    pub ground_truth: Vec<GroundTruthSample>,
    pub frames: Vec<Frame>,
}

impl Run {
    pub fn duration(&self) -> f64 {
        match (self.ground_truth.first(), self.ground_truth.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SimError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Run, SimError> {
        let text = std::fs::read_to_string(path)?;
        let run: Run = serde_json::from_str(&text)?;
        if run.sim_version != SIM_VERSION {
            return Err(SimError::Version(run.sim_version));
        }
        Ok(run)
    }
}

/// Renders the observations of `world` from a body pose.
pub fn render_observations(
    world: &World,
    body_pose: &Pose3,
    k: &CameraIntrinsics,
    t_bc: &Pose3,
    pixel_noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>,
) -> Vec<Observation> {
    let t_cw = body_pose.compose(t_bc).inverse();
    let mut noise = pixel_noise;
    let mut out = Vec::new();
    for lm in &world.landmarks {
        let pc = t_cw.transform_point(&lm.xyz);
        if pc.z < k.min_depth || pc.z > k.max_depth {
            continue;
        }
        let Ok(proj) = project_point(&pc, k) else { continue };
        if !proj.in_bounds {
            continue;
        }
        let mut px = proj.pixel;
        if let Some((dist, rng)) = noise.as_mut() {
            px.x += dist.sample(*rng);
            px.y += dist.sample(*rng);
            if !k.in_bounds(&px) {
                continue;
            }
        }
        out.push(Observation { id: lm.id, pixel: px });
    }
    out
}

const ODOMETRY_STREAM: u64 = 0x6f64_6f6d;
const EVENT_STREAM: u64 = 0x6576_656e;

/// Simulates camera frames and wheel odometry along a trajectory.
///
/// Odometry starts at identity, so the odometry frame coincides with the body
/// frame at t = 0. Its noise is applied to each planar increment with variance
/// proportional to the distance (or angle) of that increment.
pub fn simulate_run(
    world: &World,
    trajectory: &TrajectoryConfig,
    k: &CameraIntrinsics,
    t_bc: &Pose3,
    noise: &NoiseModel,
) -> Result<Run, SimError> {
    k.validate()?;
    noise.validate()?;
    let ground_truth = generate_trajectory(trajectory)?;
    for s in &ground_truth {
        let t = s.body_pose.translation();
        if !world.extent.contains_xy(t.x, t.y) {
            return config_err(format!("trajectory leaves the world extent at t = {:.2}", s.timestamp));
        }
    }
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut odom_rng = ChaCha8Rng::seed_from_u64(noise.seed ^ ODOMETRY_STREAM);
    let pixel_dist = Normal::new(0.0, noise.pixel_sigma).map_err(|e| SimError::Config(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut frames = Vec::with_capacity(ground_truth.len());
    let mut odom = Pose3::identity();
    for (i, s) in ground_truth.iter().enumerate() {
        if i > 0 {
            let step = ground_truth[i - 1].body_pose.inverse().compose(&s.body_pose);
            odom = odom.compose(&step);
            if noise.odom_trans_sigma > 0.0 || noise.odom_rot_sigma > 0.0 {
                let dist = step.translation().norm();
                let angle = step.rotation_angle();
                let st = noise.odom_trans_sigma * dist.sqrt();
                let sr = noise.odom_rot_sigma * angle.sqrt();
                let n = Pose3::from_planar(
                    st * std_normal.sample(&mut odom_rng),
                    st * std_normal.sample(&mut odom_rng),
                    0.0,
                    sr * std_normal.sample(&mut odom_rng),
                );
                odom = odom.compose(&n);
            }
        }
        let observations = if noise.pixel_sigma > 0.0 {
            render_observations(world, &s.body_pose, k, t_bc, Some((&pixel_dist, &mut pixel_rng)))
        } else {
            render_observations(world, &s.body_pose, k, t_bc, None)
        };
        frames.push(Frame { timestamp: s.timestamp, observations, odometry_pose: odom, discontinuity: false });
    }
    Ok(Run {
        sim_version: SIM_VERSION,
        world: world.clone(),
        intrinsics: *k,
        t_bc: *t_bc,
        noise: *noise,
        ground_truth,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScriptedEvent {
    /// Empties every observation list with timestamp in `[start, end]`.
    Occlusion { start: f64, end: f64 },
    /// Teleports the robot to `pose` at time `time`; the remainder of the
    /// trajectory is carried along rigidly. Odometry is unaffected.
    Kidnap { time: f64, pose: Pose2 },
}

/// Applies occlusion and kidnap events to a run.
pub fn scripted_events(run: &Run, events: &[ScriptedEvent]) -> Result<Run, SimError> {
    let t0 = run.ground_truth.first().map(|s| s.timestamp).unwrap_or(0.0);
    let t1 = run.ground_truth.last().map(|s| s.timestamp).unwrap_or(0.0);
    let mut kidnap_frames = BTreeSet::new();
    for e in events {
        match e {
            ScriptedEvent::Occlusion { start, end } => {
                if !(start <= end) || *start < t0 || *end > t1 {
                    return config_err(format!("occlusion window [{start}, {end}] outside run [{t0}, {t1}]"));
                }
            }
            ScriptedEvent::Kidnap { time, .. } => {
                if *time < t0 || *time > t1 {
                    return config_err(format!("kidnap time {time} outside run [{t0}, {t1}]"));
                }
                let idx = run.ground_truth.partition_point(|s| s.timestamp < *time);
                if !kidnap_frames.insert(idx) {
                    return config_err("two kidnap events resolve to the same frame");
                }
            }
        }
    }
    let mut out = run.clone();
    let pixel_dist = Normal::new(0.0, run.noise.pixel_sigma).map_err(|e| SimError::Config(e.to_string()))?;
    let mut kidnaps: Vec<(usize, usize, Pose2)> = events
        .iter()
        .enumerate()
        .filter_map(|(n, e)| match e {
            ScriptedEvent::Kidnap { time, pose } => {
                Some((out.ground_truth.partition_point(|s| s.timestamp < *time), n, *pose))
            }
            _ => None,
        })
        .collect();
    kidnaps.sort_by_key(|k| k.0);
    for (idx, n, pose) in kidnaps {
        if idx >= out.ground_truth.len() {
            continue;
        }
        let target = pose.to_pose3(0.0);
        let carry = target.compose(&out.ground_truth[idx].body_pose.inverse());
        let mut rng = ChaCha8Rng::seed_from_u64(run.noise.seed ^ EVENT_STREAM ^ (n as u64).wrapping_mul(0x9e37_79b9));
        for i in idx..out.ground_truth.len() {
            let moved = carry.compose(&out.ground_truth[i].body_pose);
            let t = moved.translation();
            if !run.world.extent.contains_xy(t.x, t.y) {
                return config_err("kidnapped trajectory leaves the world extent");
            }
            out.ground_truth[i].body_pose = moved;
            out.frames[i].observations = if run.noise.pixel_sigma > 0.0 {
                render_observations(&run.world, &moved, &run.intrinsics, &run.t_bc, Some((&pixel_dist, &mut rng)))
            } else {
                render_observations(&run.world, &moved, &run.intrinsics, &run.t_bc, None)
            };
        }
        out.frames[idx].discontinuity = true;
    }
    for e in events {
        if let ScriptedEvent::Occlusion { start, end } = e {
            for f in out.frames.iter_mut().filter(|f| f.timestamp >= *start && f.timestamp <= *end) {
                f.observations.clear();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_pose;

    fn lab_run(noise: NoiseModel) -> Run {
        let world = build_world(&Preset::Lab.world_config(7)).unwrap();
        simulate_run(&world, &Preset::Lab.trajectory(), &CameraIntrinsics::default(), &default_t_bc(), &noise).unwrap()
    }

    #[test]
    fn presets_are_deterministic() {
        let a = build_world(&Preset::Lab.world_config(7)).unwrap();
        let b = build_world(&Preset::Lab.world_config(7)).unwrap();
        assert_eq!(a, b);
        let c = build_world(&Preset::Lab.world_config(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hall_extent() {
        let w = build_world(&Preset::Hall.world_config(1)).unwrap();
        assert_eq!(w.extent.size().x, 16.0);
        assert_eq!(w.extent.size().y, 27.5);
        let lab = build_world(&Preset::Lab.world_config(1)).unwrap();
        assert_eq!((lab.extent.size().x, lab.extent.size().y), (10.0, 9.0));
    }

    #[test]
    fn landmarks_unique_and_inside() {
        for p in [Preset::Lab, Preset::Hall] {
            let w = build_world(&p.world_config(3)).unwrap();
            let ids: BTreeSet<_> = w.landmarks.iter().map(|l| l.id).collect();
            assert_eq!(ids.len(), w.landmarks.len());
            assert!(w.landmarks.iter().all(|l| w.extent.contains(&l.xyz)));
        }
    }

    #[test]
    fn config_errors() {
        let mut c = Preset::Lab.world_config(0);
        c.wall_landmarks = 0;
        c.clusters.clear();
        assert!(matches!(build_world(&c), Err(SimError::Config(_))));
        let mut c = Preset::Lab.world_config(0);
        c.size[0] = 0.0;
        assert!(matches!(build_world(&c), Err(SimError::Config(_))));
    }

    #[test]
    fn trajectory_respects_velocity_limits() {
        let cfg = Preset::Lab.trajectory();
        let gt = generate_trajectory(&cfg).unwrap();
        let dt = 1.0 / cfg.rate_hz;
        for w in gt.windows(2) {
            assert!(w[1].timestamp > w[0].timestamp);
            let step = relative_pose(&w[0].body_pose, &w[1].body_pose);
            assert!(step.translation().norm() / dt <= cfg.max_linear_velocity * (1.0 + 1e-9));
            assert!(step.rotation_angle() / dt <= cfg.max_angular_velocity * (1.0 + 1e-9));
        }
    }

    #[test]
    fn leaving_the_world_is_an_error() {
        let world = build_world(&Preset::Lab.world_config(0)).unwrap();
        let traj = TrajectoryConfig { waypoints: vec![[5.0, 4.0, 0.0], [12.0, 4.0, 0.0]], ..Default::default() };
        let r = simulate_run(&world, &traj, &CameraIntrinsics::default(), &default_t_bc(), &NoiseModel::zero(0));
        assert!(matches!(r, Err(SimError::Config(_))));
    }

    #[test]
    fn zero_noise_odometry_and_pixels_are_exact() {
        let run = lab_run(NoiseModel::zero(1));
        for i in 1..run.frames.len() {
            let odo = relative_pose(&run.frames[i - 1].odometry_pose, &run.frames[i].odometry_pose);
            let gt = relative_pose(&run.ground_truth[i - 1].body_pose, &run.ground_truth[i].body_pose);
            assert!(odo.max_abs_diff(&gt) < 1e-12);
        }
        for (s, f) in run.ground_truth.iter().zip(&run.frames).step_by(17) {
            let t_cw = s.body_pose.compose(&run.t_bc).inverse();
            for o in &f.observations {
                let lm = &run.world.landmarks[o.id as usize];
                let px = project_point(&t_cw.transform_point(&lm.xyz), &run.intrinsics).unwrap().pixel;
                assert_eq!(px, o.pixel);
            }
        }
    }

    #[test]
    fn landmark_behind_camera_is_not_observed() {
        let world = World {
            name: "two".into(),
            extent: Bounds { min: Vector3::new(-10.0, -10.0, 0.0), max: Vector3::new(10.0, 10.0, 3.0) },
            landmarks: vec![
                WorldLandmark { id: 0, xyz: Vector3::new(3.0, 0.0, 1.2) },
                WorldLandmark { id: 1, xyz: Vector3::new(-3.0, 0.0, 1.2) },
            ],
        };
        let obs = render_observations(&world, &Pose3::identity(), &CameraIntrinsics::default(), &default_t_bc(), None);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].id, 0);
    }

    #[test]
    fn pixel_noise_matches_configured_distribution() {
        let noisy = lab_run(NoiseModel { pixel_sigma: 1.0, ..NoiseModel::zero(5) });
        let exact = lab_run(NoiseModel::zero(5));
        let mut sum = [0.0; 2];
        let mut n = 0usize;
        for (a, b) in noisy.frames.iter().zip(&exact.frames) {
            for o in &a.observations {
                if let Some(e) = b.observations.iter().find(|e| e.id == o.id) {
                    sum[0] += (o.pixel.x - e.pixel.x).abs();
                    sum[1] += (o.pixel.y - e.pixel.y).abs();
                    n += 1;
                }
            }
        }
        assert!(n >= 10_000, "only {n} observations");
        // Mean absolute deviation of N(0, σ²) is σ·sqrt(2/π).
        for s in sum {
            let folded = s / n as f64 * (PI / 2.0).sqrt();
            assert!((0.9..=1.1).contains(&folded), "folded statistic {folded}");
        }
    }

    #[test]
    fn full_rotation_in_lab_sees_every_landmark() {
        let world = build_world(&Preset::Lab.world_config(7)).unwrap();
        let k = CameraIntrinsics::default();
        let mut seen = BTreeSet::new();
        for i in 0..360 {
            let pose = Pose3::from_planar(5.0, 4.5, 0.0, (i as f64).to_radians());
            for o in render_observations(&world, &pose, &k, &default_t_bc(), None) {
                seen.insert(o.id);
            }
        }
        assert_eq!(seen.len(), world.landmarks.len());
    }

    #[test]
    fn runs_are_deterministic() {
        let a = lab_run(NoiseModel { seed: 3, ..NoiseModel::default() });
        let b = lab_run(NoiseModel { seed: 3, ..NoiseModel::default() });
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn occlusion_empties_window() {
        let run = lab_run(NoiseModel::zero(0));
        let out = scripted_events(&run, &[ScriptedEvent::Occlusion { start: 10.0, end: 12.0 }]).unwrap();
        for f in &out.frames {
            if (10.0..=12.0).contains(&f.timestamp) {
                assert!(f.observations.is_empty());
            } else {
                let orig = run.frames.iter().find(|g| g.timestamp == f.timestamp).unwrap();
                assert_eq!(orig, f);
            }
        }
    }

    #[test]
    fn no_events_is_identity() {
        let run = lab_run(NoiseModel::default());
        assert_eq!(scripted_events(&run, &[]).unwrap(), run);
    }

    #[test]
    fn kidnap_teleports_ground_truth_only() {
        let run = lab_run(NoiseModel::zero(0));
        let target = Pose2::new(5.0, 4.0, 1.0);
        let out = scripted_events(&run, &[ScriptedEvent::Kidnap { time: 20.0, pose: target }]).unwrap();
        let idx = out.ground_truth.iter().position(|s| s.timestamp >= 20.0).unwrap();
        assert!(out.ground_truth[idx].body_pose.max_abs_diff(&target.to_pose3(0.0)) < 1e-12);
        assert!(out.frames[idx].discontinuity);
        for (a, b) in out.frames.iter().zip(&run.frames) {
            assert_eq!(a.odometry_pose, b.odometry_pose);
        }
        let dup = scripted_events(
            &run,
            &[
                ScriptedEvent::Kidnap { time: 20.0, pose: target },
                ScriptedEvent::Kidnap { time: 20.0, pose: Pose2::new(2.0, 2.0, 0.0) },
            ],
        );
        assert!(matches!(dup, Err(SimError::Config(_))));
        let outside = scripted_events(&run, &[ScriptedEvent::Occlusion { start: -5.0, end: 1.0 }]);
        assert!(matches!(outside, Err(SimError::Config(_))));
    }
}
