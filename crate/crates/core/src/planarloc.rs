//! Planar localization output for a navigation stack: the body pose in the
//! map frame and the map-to-odometry correction.

use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;

use crate::frontend::TrackStatus;
use crate::geometry::{GeometryError, Pose2, Pose3};

/// Body pose in the world frame from the camera's world-to-camera transform.
pub fn camera_to_body(t_cw: &Pose3, t_bc: &Pose3) -> Pose3 {
    t_cw.inverse().compose(&t_bc.inverse())
}

/// Drops height, roll and pitch. Yaw comes from the body x-axis projected on
/// the ground plane.
pub fn planarize(t_wb: &Pose3) -> Result<Pose2, GeometryError> {
    let x_axis = t_wb.rotation_matrix().column(0).into_owned();
    if x_axis.x.hypot(x_axis.y) < 1e-6 {
        return Err(GeometryError::DegenerateOrientation);
    }
    let t = t_wb.translation();
    Ok(Pose2::new(t.x, t.y, x_axis.y.atan2(x_axis.x)))
}

/// Correction that maps odometry-frame poses into the map frame.
pub fn compute_map_to_odom(body_in_map: &Pose2, odom_body: &Pose2) -> Pose2 {
    body_in_map.compose(&odom_body.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Visual,
    Odometry,
}

impl PoseSource {
    pub fn from_status(status: TrackStatus) -> Self {
        if status == TrackStatus::TrackingVisual {
            PoseSource::Visual
        } else {
            PoseSource::Odometry
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOutput {
    pub timestamp: f64,
    pub map_t_odom: Pose2,
    pub body_in_map: Pose2,
    pub source: PoseSource,
}

/// Holds the last visual correction and produces one output per frame.
#[derive(Debug, Clone, Default)]
pub struct LocalizationPublisher {
    correction: Option<Pose2>,
}

impl LocalizationPublisher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn correction(&self) -> Option<Pose2> {
        self.correction
    }

    /// `body_in_map` is the current estimate; `odom_body` the planarized
    /// odometry pose. The correction is refreshed on visual updates (or when
    /// none exists yet) and held otherwise.
    pub fn publish(
        &mut self,
        timestamp: f64,
        source: PoseSource,
        body_in_map: &Pose2,
        odom_body: &Pose2,
    ) -> LocalizationOutput {
        if source == PoseSource::Visual || self.correction.is_none() {
            self.correction = Some(compute_map_to_odom(body_in_map, odom_body));
        }
        let map_t_odom = self.correction.expect("set above");
        LocalizationOutput { timestamp, map_t_odom, body_in_map: map_t_odom.compose(odom_body), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LocalizationRow {
    t: f64,
    source: PoseSource,
    map_x: f64,
    map_y: f64,
    map_yaw: f64,
    corr_x: f64,
    corr_y: f64,
    corr_yaw: f64,
}

pub fn write_localization_csv(path: &Path, outputs: &[LocalizationOutput]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outputs {
        w.serialize(LocalizationRow {
            t: o.timestamp,
            source: o.source,
            map_x: o.body_in_map.x,
            map_y: o.body_in_map.y,
            map_yaw: o.body_in_map.yaw,
            corr_x: o.map_t_odom.x,
            corr_y: o.map_t_odom.y,
            corr_yaw: o.map_t_odom.yaw,
        })?;
    }
    w.flush()
}

pub fn read_localization_csv(path: &Path) -> io::Result<Vec<LocalizationOutput>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LocalizationRow>()
        .map(|row| {
            let row = row.map_err(io::Error::other)?;
            Ok(LocalizationOutput {
                timestamp: row.t,
                map_t_odom: Pose2 { x: row.corr_x, y: row.corr_y, yaw: row.corr_yaw },
                body_in_map: Pose2 { x: row.map_x, y: row.map_y, yaw: row.map_yaw },
                source: row.source,
            })
        })
        .collect()
}
