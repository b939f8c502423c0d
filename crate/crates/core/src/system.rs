//! Frame-by-frame orchestration: initialization, tracking with odometry
//! fallback, keyframe mapping, scale recovery, loop closure, relocalization
//! and localization output.
//!
//! By default everything runs synchronously on the caller's thread. With
//! [`System::enable_pipelining`] keyframes are handed to a backend worker
//! through a channel and the map is shared behind a read/write lock.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::ops::Range;
use std::path::Path;
use std::sync::{mpsc, Arc, RwLock};
use std::thread::JoinHandle;
use thiserror::Error;

use crate::backend::{
    bundle_adjust, global_bundle_adjust, select_local_window, triangulate_new_points, BackendError,
    InformationMatrices, LandmarkId, MapState, SolveKind, SolveReport, SolveStatus,
};
use crate::config::{Mode, SlamConfig};
use crate::evaluation::{write_trajectory_csv, TrajectorySample};
use crate::frontend::{
    decide_keyframe, initialize_two_view, reference_keyframe, track_frame, write_tracking_log, InitError, Keyframe,
    KeyframeId, TrackState, TrackStatus, TrackingContext, TrackingRow,
};
use crate::geometry::{CameraIntrinsics, Pose3};
use crate::mapstore::{detect_and_close_loop, relocalize};
use crate::planarloc::{
    camera_to_body, planarize, write_localization_csv, LocalizationOutput, LocalizationPublisher, PoseSource,
};
use crate::scaleinit::{apply_scale, estimate_scale, provisional_units_per_meter, ScaleError};
use crate::simworld::{FeatureId, Frame};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("mode {0} needs a metric map")]
    NoMap(&'static str),
}

/// Pose output for one processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub timestamp: f64,
    pub status: TrackStatus,
    /// Camera pose in map units; `None` until a pose hypothesis exists.
    pub t_cw: Option<Pose3>,
    /// Body pose in the metric map frame, once the scale is known.
    pub body_in_map: Option<Pose3>,
    pub localization: Option<LocalizationOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub t: f64,
    pub s: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEvent {
    pub t: f64,
    pub new_kf: KeyframeId,
    pub candidate: KeyframeId,
    pub overlap: f64,
    pub merged_landmarks: usize,
    pub new_associations: usize,
    pub status: SolveStatus,
    /// Keyframe poses (`t_cw`) around the closing global solve.
    pub candidate_pose_before: Pose3,
    pub new_pose_before: Pose3,
    pub candidate_pose_after: Pose3,
    pub new_pose_after: Pose3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub t: f64,
    pub keyframes_discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocalizationEvent {
    pub t: f64,
    pub keyframe: KeyframeId,
    pub overlap: f64,
    pub inliers: usize,
}

/// Discontinuity in the pose output when vision takes over from odometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    /// Camera displacement between the odometry prediction and the visual
    /// estimate, meters.
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub frames: usize,
    pub initialized_at: Option<f64>,
    pub status_counts: BTreeMap<String, usize>,
    pub keyframes: usize,
    pub landmarks: usize,
    pub landmarks_created: usize,
    pub landmarks_culled: usize,
    pub scale_events: Vec<ScaleEvent>,
    pub solves: Vec<SolveReport>,
    pub failed_solves: usize,
    pub loops: Vec<LoopEvent>,
    pub resets: Vec<ResetEvent>,
    pub relocalizations: Vec<RelocalizationEvent>,
    pub jumps: Vec<JumpEvent>,
}

impl RunReport {
    pub fn is_metric(&self) -> bool {
        !self.scale_events.is_empty()
    }

    pub fn global_solves(&self) -> impl Iterator<Item = &SolveReport> {
        self.solves.iter().filter(|s| s.kind == SolveKind::Global)
    }
}

struct KeyframeJob {
    keyframe: Keyframe,
    associations: BTreeMap<FeatureId, LandmarkId>,
}

#[derive(Debug, Default)]
struct BackendOutcome {
    kf_id: Option<KeyframeId>,
    inserted_pose: Pose3,
    solves: Vec<SolveReport>,
    scale: Option<ScaleEvent>,
    loop_event: Option<LoopEvent>,
    created: usize,
    culled: usize,
}

/// Mapping work done for each new keyframe.
#[derive(Clone)]
struct Backend {
    config: SlamConfig,
    k: CameraIntrinsics,
    omega: InformationMatrices,
    /// Landmark id ranges created per keyframe, awaiting the re-observation
    /// check.
    recent: VecDeque<(KeyframeId, Range<LandmarkId>)>,
}

impl Backend {
    fn push_result(solves: &mut Vec<SolveReport>, result: Result<SolveReport, BackendError>) {
        match result {
            Ok(r) => solves.push(r),
            Err(BackendError::SolveFailed { report }) => solves.push(*report),
            Err(e) => debug!("solve skipped: {e}"),
        }
    }

    /// Drops recently created landmarks that later keyframes failed to
    /// re-observe.
    fn cull_recent(&mut self, map: &mut MapState, newest: KeyframeId) -> usize {
        let mut removed = 0;
        while let Some((kf, range)) = self.recent.front() {
            if newest < kf + self.config.recent_landmark_window {
                break;
            }
            for lm in range.clone() {
                if map.landmarks.get(&lm).is_some_and(|l| l.observers.len() < self.config.recent_landmark_min_observers)
                {
                    map.remove_landmark(lm);
                    removed += 1;
                }
            }
            self.recent.pop_front();
        }
        removed
    }

    fn process(&mut self, map: &mut MapState, job: KeyframeJob) -> BackendOutcome {
        let t = job.keyframe.timestamp;
        let inserted_pose = job.keyframe.t_cw;
        let id = map.insert_keyframe(job.keyframe);
        for (feature, lm) in job.associations {
            if map.landmarks.contains_key(&lm) {
                map.associate(id, feature, lm);
            }
        }
        let first_new = map.next_landmark_id;
        let stats = triangulate_new_points(map, id, &self.k, &self.omega, &self.config.triangulation);
        self.recent.push_back((id, first_new..map.next_landmark_id));
        let culled = self.cull_recent(map, id);
        map.cull_landmarks();
        map.rebuild_covisibility();
        let mut out =
            BackendOutcome { kf_id: Some(id), inserted_pose, created: stats.created, culled, ..Default::default() };

        let mut ba = self.config.ba;
        ba.use_odometry &= !map.unscaled;
        let local = select_local_window(map, id, self.config.covisibility_min_weight)
            .and_then(|w| bundle_adjust(map, &w, &self.k, &self.omega, &ba, SolveKind::Local, Some(id)));
        Self::push_result(&mut out.solves, local);

        if map.unscaled {
            if map.keyframes.len() >= self.config.scale_keyframes {
                self.initialize_scale(map, t, &mut out);
            }
        } else if self.config.loop_closure {
            match detect_and_close_loop(map, id, &self.k, &self.omega, &self.config.ba, &self.config.place) {
                Ok(Some(lc)) => {
                    info!("loop closed between keyframes {} and {}", lc.candidate, lc.new_kf);
                    out.loop_event = Some(LoopEvent {
                        t,
                        new_kf: lc.new_kf,
                        candidate: lc.candidate,
                        overlap: lc.overlap,
                        merged_landmarks: lc.merged_landmarks,
                        new_associations: lc.new_associations,
                        status: lc.report.status,
                        candidate_pose_before: lc.candidate_pose_before,
                        new_pose_before: lc.new_pose_before,
                        candidate_pose_after: map.keyframes[&lc.candidate].t_cw,
                        new_pose_after: map.keyframes[&lc.new_kf].t_cw,
                    });
                    out.solves.push(lc.report);
                }
                Ok(None) => {}
                Err(e) => Self::push_result(&mut out.solves, Err(e)),
            }
        }
        map.rebuild_covisibility();
        out
    }

    fn initialize_scale(&self, map: &mut MapState, t: f64, out: &mut BackendOutcome) {
        let kfs: Vec<&Keyframe> = map.keyframes.values().collect();
        let estimate = match estimate_scale(&kfs, &map.t_bc) {
            Ok(e) => e,
            Err(ScaleError::DegenerateMotion(_) | ScaleError::TooFewKeyframes(_)) => return,
            Err(e) => {
                warn!("scale estimation failed: {e}");
                return;
            }
        };
        if let Err(e) = apply_scale(map, estimate.s) {
            warn!("cannot apply scale: {e}");
            return;
        }
        info!("metric scale {:.6} from {} keyframes", estimate.s, estimate.n_keyframes_used);
        out.scale = Some(ScaleEvent { t, s: estimate.s, n: estimate.n_keyframes_used });
        Self::push_result(&mut out.solves, global_bundle_adjust(map, &self.k, &self.omega, &self.config.ba));
    }
}

enum Job {
    Keyframe(KeyframeJob),
    Flush(mpsc::Sender<()>),
}

struct Worker {
    jobs: mpsc::Sender<Job>,
    outcomes: mpsc::Receiver<BackendOutcome>,
    handle: JoinHandle<()>,
    in_flight: usize,
}

impl Worker {
    fn spawn(mut backend: Backend, map: Arc<RwLock<MapState>>) -> Self {
        let (jobs, job_rx) = mpsc::channel::<Job>();
        let (out_tx, outcomes) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            for job in job_rx {
                match job {
                    Job::Keyframe(job) => {
                        let mut guard = map.write().expect("map lock poisoned");
                        let outcome = backend.process(&mut guard, job);
                        // Sent before the lock is released so a reader that
                        // sees the mutation also finds the outcome queued.
                        if out_tx.send(outcome).is_err() {
                            return;
                        }
                    }
                    Job::Flush(ack) => {
                        let _ = ack.send(());
                    }
                }
            }
        });
        Self { jobs, outcomes, handle, in_flight: 0 }
    }

    fn flush(&self) {
        let (tx, rx) = mpsc::channel();
        if self.jobs.send(Job::Flush(tx)).is_ok() {
            let _ = rx.recv();
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct SystemOutput {
    pub map: MapState,
    pub intrinsics: CameraIntrinsics,
    pub outputs: Vec<FrameOutput>,
    pub report: RunReport,
}

impl SystemOutput {
    /// Per-frame status and camera pose; frames without a pose log identity.
    pub fn tracking_rows(&self) -> Vec<TrackingRow> {
        self.outputs
            .iter()
            .map(|o| TrackingRow::new(o.timestamp, o.status, &o.t_cw.unwrap_or_else(Pose3::identity)))
            .collect()
    }

    pub fn trajectory(&self) -> Vec<TrajectorySample> {
        self.outputs
            .iter()
            .filter_map(|o| {
                o.body_in_map.map(|pose| TrajectorySample {
                    t: o.timestamp,
                    source: PoseSource::from_status(o.status),
                    pose,
                })
            })
            .collect()
    }

    pub fn localization(&self) -> Vec<LocalizationOutput> {
        self.outputs.iter().filter_map(|o| o.localization).collect()
    }

    /// Writes `tracking.csv`, `trajectory.csv`, `localization.csv` and
    /// `report.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_tracking_log(&dir.join("tracking.csv"), &self.tracking_rows())?;
        write_trajectory_csv(&dir.join("trajectory.csv"), &self.trajectory())?;
        write_localization_csv(&dir.join("localization.csv"), &self.localization())?;
        let json = serde_json::to_string_pretty(&self.report).map_err(io::Error::other)?;
        std::fs::write(dir.join("report.json"), json)
    }
}

pub struct System {
    config: SlamConfig,
    k: CameraIntrinsics,
    t_bc: Pose3,
    backend: Backend,
    mode: Mode,
    map: Arc<RwLock<MapState>>,
    worker: Option<Worker>,
    state: TrackState,
    pending_init: Option<Frame>,
    odom_segment: u32,
    lost_frames: usize,
    /// No pose hypothesis in the map yet; only relocalization can give one.
    awaiting_relocalization: bool,
    /// False after an odometry discontinuity until vision confirms the pose.
    pose_trusted: bool,
    publisher: LocalizationPublisher,
    report: RunReport,
    outputs: Vec<FrameOutput>,
}

impl System {
    pub fn new(config: SlamConfig, k: CameraIntrinsics, t_bc: Pose3) -> Self {
        let omega = config.information();
        let backend = Backend { config: config.clone(), k, omega, recent: VecDeque::new() };
        let map = MapState { t_bc, ..MapState::new() };
        Self {
            config,
            k,
            t_bc,
            backend,
            mode: Mode::Slam,
            map: Arc::new(RwLock::new(map)),
            worker: None,
            state: TrackState::uninitialized(),
            pending_init: None,
            odom_segment: 0,
            lost_frames: 0,
            awaiting_relocalization: false,
            pose_trusted: true,
            publisher: LocalizationPublisher::new(),
            report: RunReport::default(),
            outputs: Vec::new(),
        }
    }

    /// Starts from an existing map, e.g. one loaded from disk.
    pub fn with_map(config: SlamConfig, map: MapState, k: CameraIntrinsics) -> Self {
        let mut s = Self::new(config, k, map.t_bc);
        s.odom_segment = map.keyframes.values().map(|kf| kf.odom_segment + 1).max().unwrap_or(0);
        *s.map.write().expect("map lock poisoned") = map;
        s
    }

    /// Hands keyframe processing to a backend worker thread.
    pub fn enable_pipelining(&mut self) {
        if self.worker.is_none() {
            self.worker = Some(Worker::spawn(self.backend.clone(), self.map.clone()));
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<(), SystemError> {
        if mode != Mode::Slam {
            self.flush();
            let map = self.map.read().expect("map lock poisoned");
            if map.is_empty() || map.unscaled {
                return Err(SystemError::NoMap(mode.as_str()));
            }
            if self.state.status == TrackStatus::Uninitialized {
                self.awaiting_relocalization = true;
                self.odom_segment = map.keyframes.values().map(|kf| kf.odom_segment + 1).max().unwrap_or(0);
            }
        }
        self.mode = mode;
        self.report.mode = mode;
        Ok(())
    }

    pub fn track_state(&self) -> &TrackState {
        &self.state
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    /// Snapshot of the current map (waits for pending backend work).
    pub fn map_snapshot(&mut self) -> MapState {
        self.flush();
        self.drain_outcomes();
        self.map.read().expect("map lock poisoned").clone()
    }

    fn flush(&self) {
        if let Some(w) = &self.worker {
            w.flush();
        }
    }

    fn drain_outcomes(&mut self) {
        let Some(worker) = &mut self.worker else { return };
        let outcomes: Vec<BackendOutcome> = worker.outcomes.try_iter().collect();
        worker.in_flight -= outcomes.len();
        for o in outcomes {
            self.handle_outcome(o, false);
        }
    }

    /// Blocks until the worker has no keyframe in flight. Returns the product
    /// of scale factors applied meanwhile.
    fn wait_for_backend(&mut self) -> f64 {
        let mut scale = 1.0;
        while let Some(w) = self.worker.as_mut().filter(|w| w.in_flight > 0) {
            let Ok(outcome) = w.outcomes.recv() else { break };
            w.in_flight -= 1;
            if let Some(e) = &outcome.scale {
                scale *= e.s;
            }
            self.handle_outcome(outcome, false);
        }
        scale
    }

    fn handle_outcome(&mut self, outcome: BackendOutcome, synchronous: bool) {
        if synchronous && self.state.status == TrackStatus::TrackingVisual {
            if let Some(id) = outcome.kf_id {
                self.state.reference = Some((id, outcome.inserted_pose));
            }
        }
        self.report.landmarks_created += outcome.created;
        self.report.landmarks_culled += outcome.culled;
        self.report.failed_solves += outcome.solves.iter().filter(|s| s.status == SolveStatus::Failed).count();
        self.report.solves.extend(outcome.solves);
        if let Some(scale) = outcome.scale {
            self.state.rescale(scale.s);
            self.report.scale_events.push(scale);
        }
        if let Some(l) = outcome.loop_event {
            self.report.loops.push(l);
        }
    }

    pub fn process_frame(&mut self, frame: &Frame) -> FrameOutput {
        if frame.discontinuity {
            self.odom_segment += 1;
            self.pose_trusted = false;
            self.pending_init = None;
        }
        let needs_init = self.mode == Mode::Slam && self.map.read().expect("map lock poisoned").is_empty();
        let out = if needs_init { self.initialize(frame) } else { self.track(frame) };
        self.report.frames += 1;
        *self.report.status_counts.entry(out.status.as_str().to_string()).or_insert(0) += 1;
        self.outputs.push(out.clone());
        out
    }

    fn no_pose(frame: &Frame, status: TrackStatus) -> FrameOutput {
        FrameOutput { timestamp: frame.timestamp, status, t_cw: None, body_in_map: None, localization: None }
    }

    fn initialize(&mut self, frame: &Frame) -> FrameOutput {
        let enough = frame.observations.len() >= self.config.init.min_shared;
        let Some(first) = &self.pending_init else {
            self.pending_init = enough.then(|| frame.clone());
            return Self::no_pose(frame, TrackStatus::Uninitialized);
        };
        let result = initialize_two_view(
            first,
            frame,
            &self.k,
            &self.t_bc,
            &self.backend.omega,
            &self.config.init,
            self.odom_segment,
        );
        match result {
            Ok(map) => {
                let (id, kf) = map.keyframes.iter().next_back().expect("two keyframes");
                self.state = TrackState {
                    status: TrackStatus::TrackingVisual,
                    t_cw: kf.t_cw,
                    inlier_count: kf.associations.len(),
                    timestamp: frame.timestamp,
                    odom_t_ob: frame.odometry_pose,
                    reference: Some((*id, kf.t_cw)),
                    tracked: kf.associations.clone(),
                };
                info!("map initialized at t = {:.2} with {} landmarks", frame.timestamp, map.landmarks.len());
                self.flush();
                *self.map.write().expect("map lock poisoned") = map;
                self.report.initialized_at = Some(frame.timestamp);
                self.pending_init = None;
                self.lost_frames = 0;
                self.pose_trusted = true;
                FrameOutput {
                    timestamp: frame.timestamp,
                    status: TrackStatus::TrackingVisual,
                    t_cw: Some(self.state.t_cw),
                    body_in_map: None,
                    localization: None,
                }
            }
            Err(InitError::LowParallax { .. }) => Self::no_pose(frame, TrackStatus::Uninitialized),
            Err(e) => {
                debug!("initialization refused: {e}");
                self.pending_init = enough.then(|| frame.clone());
                Self::no_pose(frame, TrackStatus::Uninitialized)
            }
        }
    }

    fn track(&mut self, frame: &Frame) -> FrameOutput {
        let map_arc = self.map.clone();
        let guard = map_arc.read().expect("map lock poisoned");
        // Outcomes are queued before the worker releases the lock, so every
        // rescale visible in the map is applied to the tracker here.
        self.drain_outcomes();
        let map = &*guard;
        let units_per_meter = provisional_units_per_meter(map).unwrap_or(1.0);
        let ctx = TrackingContext {
            k: &self.k,
            t_bc: &self.t_bc,
            omega: &self.backend.omega,
            config: &self.config.tracker,
            units_per_meter,
            allow_fallback: !map.unscaled,
        };
        let prev = self.state.clone();
        let had_pose = !self.awaiting_relocalization && prev.status != TrackStatus::Uninitialized;
        let mut next = if had_pose {
            track_frame(map, frame, &prev, &ctx)
        } else {
            TrackState {
                status: TrackStatus::Lost,
                timestamp: frame.timestamp,
                odom_t_ob: frame.odometry_pose,
                reference: None,
                tracked: BTreeMap::new(),
                ..prev.clone()
            }
        };

        if next.status != TrackStatus::TrackingVisual {
            if let Some(r) = relocalize(map, frame, &ctx, &self.config.place) {
                info!("relocalized at t = {:.2} against keyframe {}", frame.timestamp, r.keyframe);
                self.report.relocalizations.push(RelocalizationEvent {
                    t: frame.timestamp,
                    keyframe: r.keyframe,
                    overlap: r.overlap,
                    inliers: r.inliers.len(),
                });
                if had_pose {
                    let moved = (r.pose.inverse().translation() - next.t_cw.inverse().translation()).norm();
                    self.report.jumps.push(JumpEvent { t: frame.timestamp, distance: moved / units_per_meter });
                }
                next.status = TrackStatus::TrackingVisual;
                next.t_cw = r.pose;
                next.inlier_count = r.inliers.len();
                next.reference = reference_keyframe(map, &r.inliers).map(|id| (id, map.keyframes[&id].t_cw));
                next.tracked = r.inliers;
            }
        } else if had_pose && prev.status != TrackStatus::TrackingVisual {
            let predicted = crate::frontend::predict_from_odometry(
                &prev.t_cw,
                &prev.odom_t_ob,
                &frame.odometry_pose,
                &self.t_bc,
                units_per_meter,
            );
            let moved = (next.t_cw.inverse().translation() - predicted.inverse().translation()).norm();
            self.report.jumps.push(JumpEvent { t: frame.timestamp, distance: moved / units_per_meter });
        }

        let visual = next.status == TrackStatus::TrackingVisual;
        if visual {
            self.lost_frames = 0;
            self.pose_trusted = true;
            self.awaiting_relocalization = false;
        }
        let has_pose = visual || had_pose;

        let mut reset = false;
        if next.status == TrackStatus::Lost && map.unscaled && self.mode == Mode::Slam {
            self.lost_frames += 1;
            reset = self.lost_frames > self.config.max_lost_frames;
        }

        let mapping = self.mode.maps() && has_pose;
        let want_keyframe = mapping
            && match next.status {
                TrackStatus::TrackingVisual => decide_keyframe(&next, map, &self.config.keyframe),
                TrackStatus::OdometryOnly => {
                    self.pose_trusted
                        && !map.unscaled
                        && frame.observations.len() >= self.config.fallback_keyframe_min_observations
                        && map.keyframes.values().next_back().is_some_and(|last| {
                            (frame.odometry_pose.translation() - last.odom_t_ob.translation()).norm()
                                > self.config.keyframe.max_translation
                        })
                }
                _ => false,
            };
        let mut job = want_keyframe.then(|| KeyframeJob {
            keyframe: Keyframe::new(
                next.t_cw,
                frame.odometry_pose,
                frame.observations.clone(),
                frame.timestamp,
                self.odom_segment,
            ),
            associations: next.tracked.clone(),
        });

        let body_in_map =
            (has_pose && !map.unscaled).then(|| map.map_t_world.compose(&camera_to_body(&next.t_cw, &self.t_bc)));
        let localization = body_in_map.and_then(|body| {
            let body2 = planarize(&body).ok()?;
            let odom2 = planarize(&frame.odometry_pose).ok()?;
            Some(self.publisher.publish(frame.timestamp, PoseSource::from_status(next.status), &body2, &odom2))
        });
        let out = FrameOutput {
            timestamp: frame.timestamp,
            status: next.status,
            t_cw: has_pose.then_some(next.t_cw),
            body_in_map,
            localization,
        };
        drop(guard);

        if reset {
            self.reset_map(frame);
            return out;
        }
        self.state = next;
        if let Some(job) = job.as_mut() {
            // One keyframe in flight at a time: the tracker waits for the
            // previous one so the map keeps up with the camera.
            let s = self.wait_for_backend();
            if s != 1.0 {
                let t = *job.keyframe.t_cw.translation();
                job.keyframe.t_cw.set_translation(t * s);
            }
        }
        if let Some(job) = job {
            match &mut self.worker {
                Some(w) => {
                    if w.jobs.send(Job::Keyframe(job)).is_ok() {
                        w.in_flight += 1;
                    }
                }
                None => {
                    let outcome = {
                        let mut map = self.map.write().expect("map lock poisoned");
                        self.backend.process(&mut map, job)
                    };
                    self.handle_outcome(outcome, true);
                }
            }
        }
        out
    }

    fn reset_map(&mut self, frame: &Frame) {
        self.flush();
        self.drain_outcomes();
        let mut map = self.map.write().expect("map lock poisoned");
        warn!("tracking lost for {} frames before scale recovery; starting a new map", self.lost_frames);
        self.report.resets.push(ResetEvent { t: frame.timestamp, keyframes_discarded: map.keyframes.len() });
        *map = MapState { t_bc: self.t_bc, ..MapState::new() };
        drop(map);
        self.state = TrackState::uninitialized();
        self.lost_frames = 0;
        self.odom_segment += 1;
        self.pending_init = (frame.observations.len() >= self.config.init.min_shared).then(|| frame.clone());
    }

    /// Waits for pending backend work and returns everything produced.
    pub fn finish(mut self) -> SystemOutput {
        self.flush();
        self.drain_outcomes();
        if let Some(w) = self.worker.take() {
            drop(w.jobs);
            let _ = w.handle.join();
        }
        let map = match Arc::try_unwrap(self.map) {
            Ok(lock) => lock.into_inner().expect("map lock poisoned"),
            Err(shared) => shared.read().expect("map lock poisoned").clone(),
        };
        self.report.keyframes = map.keyframes.len();
        self.report.landmarks = map.landmarks.len();
        SystemOutput { map, intrinsics: self.k, outputs: self.outputs, report: self.report }
    }
}

/// Runs every frame through a fresh system.
pub fn run_frames(mut system: System, frames: &[Frame]) -> SystemOutput {
    for f in frames {
        system.process_frame(f);
    }
    system.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::predict_from_odometry;
    use crate::simworld::{build_world, default_t_bc, simulate_run, NoiseModel, Preset, Run};

    fn lab_run(noise: NoiseModel) -> Run {
        let world = build_world(&Preset::Lab.world_config(7)).unwrap();
        simulate_run(&world, &Preset::Lab.trajectory(), &CameraIntrinsics::default(), &default_t_bc(), &noise).unwrap()
    }

    fn short(run: &Run, seconds: f64) -> Vec<Frame> {
        run.frames.iter().filter(|f| f.timestamp <= seconds).cloned().collect()
    }

    #[test]
    fn localization_modes_need_a_map() {
        let mut s = System::new(SlamConfig::default(), CameraIntrinsics::default(), default_t_bc());
        assert!(matches!(s.set_mode(Mode::LocalizationOnly), Err(SystemError::NoMap(_))));
        assert!(matches!(s.set_mode(Mode::ContinueMapping), Err(SystemError::NoMap(_))));
        s.set_mode(Mode::Slam).unwrap();
    }

    #[test]
    fn empty_frames_never_initialize() {
        let run = lab_run(NoiseModel::zero(0));
        let frames: Vec<Frame> =
            run.frames.iter().take(30).map(|f| Frame { observations: vec![], ..f.clone() }).collect();
        let s = System::new(SlamConfig::default(), run.intrinsics, run.t_bc);
        let out = run_frames(s, &frames);
        assert!(out.report.initialized_at.is_none());
        assert!(out.outputs.iter().all(|o| o.status == TrackStatus::Uninitialized && o.t_cw.is_none()));
        assert!(out.map.is_empty());
    }

    #[test]
    fn zero_noise_run_becomes_metric_without_gaps() {
        let run = lab_run(NoiseModel::zero(0));
        let frames = short(&run, 25.0);
        let out = run_frames(System::new(SlamConfig::default(), run.intrinsics, run.t_bc), &frames);
        let r = &out.report;
        assert!(r.initialized_at.is_some());
        assert_eq!(r.scale_events.len(), 1);
        assert!(r.scale_events[0].s > 0.0 && r.scale_events[0].n == 10);
        assert!(r.global_solves().any(|s| s.status != SolveStatus::Failed));
        out.map.check_consistency().unwrap();
        let init = out.outputs.iter().position(|o| o.t_cw.is_some()).unwrap();
        assert!(out.outputs[init..].iter().all(|o| o.t_cw.is_some()));
        let first_metric = out.outputs.iter().position(|o| o.body_in_map.is_some()).unwrap();
        assert!(out.outputs[first_metric..].iter().all(|o| o.body_in_map.is_some() && o.localization.is_some()));
    }

    #[test]
    fn occluded_frames_follow_odometry_exactly() {
        let run = lab_run(NoiseModel::zero(3));
        let mut frames = short(&run, 30.0);
        for f in frames.iter_mut().filter(|f| (22.0..=25.0).contains(&f.timestamp)) {
            f.observations.clear();
        }
        let out = run_frames(System::new(SlamConfig::default(), run.intrinsics, run.t_bc), &frames);
        assert!(out.report.is_metric());
        let mut checked = 0;
        for i in 1..frames.len() {
            let (a, b) = (&frames[i - 1], &frames[i]);
            if a.observations.is_empty() && b.observations.is_empty() {
                let (pa, pb) = (out.outputs[i - 1].t_cw.unwrap(), out.outputs[i].t_cw.unwrap());
                assert_eq!(out.outputs[i].status, TrackStatus::OdometryOnly);
                let expected = predict_from_odometry(&pa, &a.odometry_pose, &b.odometry_pose, &run.t_bc, 1.0);
                assert_eq!(pb, expected);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn pipelined_mode_produces_a_metric_map() {
        let run = lab_run(NoiseModel::zero(0));
        let frames = short(&run, 25.0);
        let mut s = System::new(SlamConfig::default(), run.intrinsics, run.t_bc);
        s.enable_pipelining();
        let out = run_frames(s, &frames);
        assert!(out.report.is_metric());
        assert_eq!(out.outputs.len(), frames.len());
        out.map.check_consistency().unwrap();
    }
}
