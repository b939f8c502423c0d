//! Experiment configuration: one versioned JSON document with every default
//! embedded.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::backend::{BaConfig, InformationMatrices, TriangulationConfig};
use crate::frontend::{InitConfig, KeyframePolicy, TrackerConfig};
use crate::geometry::{CameraIntrinsics, Pose3};
use crate::mapstore::PlaceConfig;
use crate::simworld::{default_t_bc, NoiseModel, Preset, ScriptedEvent, TrajectoryConfig, WorldConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Smallest odometry standard deviation used for the information matrix, so
/// noise-free odometry does not produce infinite weights.
const MIN_ODOMETRY_SIGMA: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("config_version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Slam,
    LocalizationOnly,
    ContinueMapping,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "slam" => Ok(Mode::Slam),
            "localization-only" => Ok(Mode::LocalizationOnly),
            "continue-mapping" => Ok(Mode::ContinueMapping),
            other => Err(ConfigError::Invalid(format!("unknown mode '{other}'"))),
        }
    }
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Slam => "slam",
            Mode::LocalizationOnly => "localization-only",
            Mode::ContinueMapping => "continue-mapping",
        }
    }

    pub fn maps(&self) -> bool {
        *self != Mode::LocalizationOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    /// Keyframes collected before the metric scale is estimated.
    pub scale_keyframes: usize,
    /// Minimum covisibility weight for a neighbor to join the local window.
    pub covisibility_min_weight: u32,
    pub keyframe: KeyframePolicy,
    pub tracker: TrackerConfig,
    pub init: InitConfig,
    pub ba: BaConfig,
    pub triangulation: TriangulationConfig,
    pub place: PlaceConfig,
    /// Pixel noise assumed by the estimator.
    pub pixel_sigma: f64,
    /// Odometry noise assumed by the estimator, per meter and per radian.
    pub odom_trans_sigma: f64,
    pub odom_rot_sigma: f64,
    /// Motion (meters, radians) over which the odometry sigmas are
    /// accumulated to build the fixed odometry information matrix. Smaller
    /// values weight odometry factors more.
    pub odom_information_span: f64,
    /// Frames without tracking before an unscaled map is discarded.
    pub max_lost_frames: usize,
    /// Observations a frame needs to become a keyframe while tracking only on
    /// odometry.
    pub fallback_keyframe_min_observations: usize,
    /// A landmark created at keyframe k is dropped when keyframe
    /// k + `recent_landmark_window` arrives and it has fewer observers than
    /// `recent_landmark_min_observers`.
    pub recent_landmark_window: u64,
    pub recent_landmark_min_observers: usize,
    pub loop_closure: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            scale_keyframes: 10,
            covisibility_min_weight: 15,
            keyframe: KeyframePolicy::default(),
            tracker: TrackerConfig::default(),
            init: InitConfig::default(),
            ba: BaConfig::default(),
            triangulation: TriangulationConfig::default(),
            place: PlaceConfig::default(),
            pixel_sigma: 1.0,
            odom_trans_sigma: 0.02,
            odom_rot_sigma: 0.01,
            odom_information_span: 0.02,
            max_lost_frames: 30,
            fallback_keyframe_min_observations: 30,
            recent_landmark_window: 2,
            recent_landmark_min_observers: 3,
            loop_closure: true,
        }
    }
}

impl SlamConfig {
    pub fn information(&self) -> InformationMatrices {
        let span = self.odom_information_span.sqrt();
        let trans = (self.odom_trans_sigma * span).max(MIN_ODOMETRY_SIGMA);
        let rot = (self.odom_rot_sigma * span).max(MIN_ODOMETRY_SIGMA);
        InformationMatrices::from_sigmas(self.pixel_sigma, trans, rot)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.scale_keyframes < 2 {
            return bad("scale_keyframes must be at least 2");
        }
        if !(self.pixel_sigma > 0.0)
            || !(self.odom_trans_sigma >= 0.0)
            || !(self.odom_rot_sigma >= 0.0)
            || !(self.odom_information_span > 0.0)
        {
            return bad("estimator sigmas must be positive");
        }
        let k = &self.keyframe;
        if !(k.max_translation > 0.0) || !(k.max_rotation > 0.0) || !(0.0..=1.0).contains(&k.min_tracked_ratio) {
            return bad("keyframe thresholds out of range");
        }
        if self.tracker.min_inliers == 0 || !(self.tracker.search_radius_px > 0.0) || !(self.tracker.chi2_gate > 0.0) {
            return bad("tracker thresholds must be positive");
        }
        if self.ba.max_iterations == 0 || !(self.ba.chi2_gate > 0.0) || !(self.ba.huber_delta > 0.0) {
            return bad("bundle adjustment settings must be positive");
        }
        if !(0.0..=1.0).contains(&self.place.min_overlap) {
            return bad("place overlap must lie in [0, 1]");
        }
        if self.init.min_shared < 5 || !(self.init.min_parallax_deg > 0.0) {
            return bad("initialization thresholds out of range");
        }
        Ok(())
    }
}

/// Everything needed to simulate and process one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub preset: Preset,
    /// Overrides the preset world when present.
    pub world: Option<WorldConfig>,
    /// Overrides the preset trajectory when present.
    pub trajectory: Option<TrajectoryConfig>,
    pub world_seed: u64,
    pub noise: NoiseModel,
    pub intrinsics: CameraIntrinsics,
    pub t_bc: Pose3,
    pub events: Vec<ScriptedEvent>,
    pub slam: SlamConfig,
    pub mode: Mode,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            preset: Preset::Lab,
            world: None,
            trajectory: None,
            world_seed: 7,
            noise: NoiseModel::default(),
            intrinsics: CameraIntrinsics::default(),
            t_bc: default_t_bc(),
            events: Vec::new(),
            slam: SlamConfig::default(),
            mode: Mode::Slam,
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        // Check the version before the schema so old files get a clear error.
        if let Some(v) = value.get("config_version").and_then(|v| v.as_u64()) {
            if v != CONFIG_VERSION as u64 {
                return Err(ConfigError::Version { found: v as u32, expected: CONFIG_VERSION });
            }
        }
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn world_config(&self) -> WorldConfig {
        self.world.clone().unwrap_or_else(|| self.preset.world_config(self.world_seed))
    }

    pub fn trajectory_config(&self) -> TrajectoryConfig {
        self.trajectory.clone().unwrap_or_else(|| self.preset.trajectory())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.config_version, expected: CONFIG_VERSION });
        }
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.intrinsics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.slam.validate()
    }
}
