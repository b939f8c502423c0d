//! Odometry-aided monocular SLAM on a synthetic world.
//!
//! The pipeline initializes an up-to-scale map from two views, tracks frames
//! against it with wheel odometry as the motion prior and fallback, recovers
//! metric scale from odometry after a few keyframes, and fuses odometry into
//! bundle adjustment. [`System`] runs the whole pipeline frame by frame.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod config;
pub mod evaluation;
pub mod frontend;
pub mod geometry;
pub mod mapstore;
pub mod planarloc;
pub mod scaleinit;
pub mod simworld;
pub mod system;

pub use backend::{BaConfig, BackendError, InformationMatrices, LandmarkId, MapState, SolveReport, SolveStatus};
pub use config::{ConfigError, Mode, RunConfig, SlamConfig, CONFIG_VERSION};
pub use evaluation::{EvalError, EvaluationReport, TrajectorySample};
pub use frontend::{Keyframe, KeyframeId, TrackState, TrackStatus};
pub use geometry::{CameraIntrinsics, GeometryError, Pose2, Pose3, Twist6};
pub use mapstore::{load_map, map_checksum, save_map, MapStoreError};
pub use planarloc::{LocalizationOutput, PoseSource};
pub use simworld::{Frame, GroundTruthSample, NoiseModel, Preset, Run, ScriptedEvent, SimError, World};
pub use system::{run_frames, FrameOutput, RunReport, System, SystemError, SystemOutput};
