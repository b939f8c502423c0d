//! SE(3)/SO(3) algebra, planar poses and pinhole projection.
//!
//! Frame convention used throughout the crate: a [`Pose3`] named `t_ab`
//! maps points expressed in frame `b` into frame `a`. So `t_wc` takes camera
//! points to the world frame, and the tracker's `t_cw` is its inverse.
//!
//! Twists are ordered `(rho, phi)`: translational part first, rotational
//! part second.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;
use std::ops::Mul;
use thiserror::Error;

/// Below this rotation angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log_se3` refuses rotations whose angle is this close to π.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} is too close to pi for a stable logarithm")]
    SingularRotation { angle: f64 },
    #[error("point depth {depth} is below the minimum depth {min_depth}")]
    BehindCamera { depth: f64, min_depth: f64 },
    #[error("body x-axis is (nearly) vertical; planar heading undefined")]
    DegenerateOrientation,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Rigid transform in SE(3).
///
/// The rotation is held as a unit quaternion so that the 7-number file
/// representation reproduces a pose bit for bit; [`Pose3::rotation_matrix`]
/// gives the matrix form used by the Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a rotation matrix. The matrix is projected onto
    /// SO(3) through its quaternion.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*rotation);
        Self { rotation: UnitQuaternion::from_rotation_matrix(&r), translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation }
    }

    /// Planar pose: translation `(x, y, z)` and rotation `yaw` about +z.
    pub fn from_planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), translation: Vector3::new(x, y, z) }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn set_translation(&mut self, translation: Vector3<f64>) {
        self.translation = translation;
    }

    /// `self ∘ other`: apply `other` first, then `self`. The product rotation
    /// is renormalized so long chains stay unit to within rounding.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: UnitQuaternion::new_normalize(self.rotation.into_inner() * other.rotation.into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3 { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Returns the quaternion-renormalized pose.
    pub fn renormalized(&self) -> Pose3 {
        Pose3 { rotation: UnitQuaternion::new_normalize(self.rotation.into_inner()), translation: self.translation }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose3 {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose3::from_rotation_matrix(&r, t)
    }

    /// Serialized form `[tx, ty, tz, qx, qy, qz, qw]`.
    pub fn to_array7(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
    }

    /// Parses `[tx, ty, tz, qx, qy, qz, qw]`. The quaternion is normalized
    /// unless it already has unit norm to within rounding, in which case it
    /// is kept verbatim.
    pub fn from_array7(a: [f64; 7]) -> Result<Pose3, GeometryError> {
        let q = Quaternion::new(a[6], a[3], a[4], a[5]);
        let n2 = q.norm_squared();
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(GeometryError::ZeroQuaternion);
        }
        let rotation = if (n2 - 1.0).abs() <= 8.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(Pose3 { rotation, translation: Vector3::new(a[0], a[1], a[2]) })
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Adjoint of this transform acting on `(rho, phi)` twists.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        ad
    }

    pub fn max_abs_diff(&self, other: &Pose3) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).abs().max()
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose3> for &'a Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: &'a Pose3) -> Pose3 {
        self.compose(rhs)
    }
}

impl Serialize for Pose3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array7().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Pose3::from_array7(a).map_err(serde::de::Error::custom)
    }
}

/// Element of se(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist6 {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist6 {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { rho: Vector3::new(v[0], v[1], v[2]), phi: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Skew-symmetric matrix of `v`.
#[rustfmt::skip]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -v.z,  v.y,
         v.z,  0.0, -v.x,
        -v.y,  v.x,  0.0,
    )
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let half = 0.5 * theta;
        (theta.sin() / theta, 2.0 * half.sin() * half.sin() / theta2)
    };
    Matrix3::identity() + a * w + b * w * w
}

/// Logarithm of a rotation matrix. Fails for angles within
/// [`NEAR_PI_MARGIN`] of π.
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let sin_theta = axis.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(GeometryError::SingularRotation { angle: theta });
    }
    if theta < SMALL_ANGLE {
        // theta / sin(theta) ≈ 1 + theta²/6
        Ok(axis * (1.0 + theta * theta / 6.0))
    } else {
        Ok(axis * (theta / sin_theta))
    }
}

/// Left Jacobian of SO(3).
pub fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let half = 0.5 * theta;
        (2.0 * half.sin() * half.sin() / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + a * w + b * w * w
}

pub fn left_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - 0.5 * w + c * w * w
}

/// The off-diagonal block `Q(rho, phi)` of the SE(3) left Jacobian.
fn left_jacobian_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    // Coefficients lose precision through cancellation long before the
    // generic small-angle cutoff, so this branch uses a wider one.
    let (c1, c2, c3) = if theta < 1e-3 {
        (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0, 1.0 / 120.0 - theta2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        (
            (theta - s) / t3,
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * t3),
        )
    };
    0.5 * r + c1 * (pr + rp + prp) + c2 * (p * p * r + r * p * p - 3.0 * prp) + c3 * (prp * p + p * prp)
}

/// Inverse of the SE(3) left Jacobian at twist `xi`.
pub fn left_jacobian_inv_se3(xi: &Twist6) -> Matrix6<f64> {
    let j_inv = left_jacobian_inv_so3(&xi.phi);
    let q = left_jacobian_q(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-j_inv * q * j_inv));
    out
}

/// Exponential map se(3) → SE(3).
pub fn exp_se3(t: &Twist6) -> Pose3 {
    let r = exp_so3(&t.phi);
    let trans = left_jacobian_so3(&t.phi) * t.rho;
    Pose3::from_rotation_matrix(&r, trans)
}

/// Logarithm map SE(3) → se(3).
pub fn log_se3(p: &Pose3) -> Result<Twist6, GeometryError> {
    let angle = p.rotation_angle();
    if angle > PI - NEAR_PI_MARGIN {
        return Err(GeometryError::SingularRotation { angle });
    }
    let phi = log_so3(&p.rotation_matrix())?;
    let rho = left_jacobian_inv_so3(&phi) * p.translation;
    Ok(Twist6 { rho, phi })
}

/// `inverse(a) ∘ b`.
pub fn relative_pose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.inverse().compose(b)
}

/// Planar pose in SE(2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn compose(&self, o: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(self.x + c * o.x - s * o.y, self.y + s * o.x + c * o.y, self.yaw + o.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn to_pose3(&self, z: f64) -> Pose3 {
        Pose3::from_planar(self.x, self.y, z, self.yaw)
    }
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for CameraIntrinsics {
    /// 640x480 forehead camera with roughly 55° horizontal field of view.
    fn default() -> Self {
        let fx = 320.0 / (27.5f64).to_radians().tan();
        Self { fx, fy: fx, cx: 320.0, cy: 240.0, width: 640, height: 480, min_depth: 0.1, max_depth: 12.0 }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(GeometryError::InvalidIntrinsics("require 0 < min_depth < max_depth".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Unit bearing of a pixel in the camera frame.
    pub fn bearing(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub in_bounds: bool,
}

pub fn project_point(p_cam: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Projection, GeometryError> {
    if !(p_cam.z >= k.min_depth) {
        return Err(GeometryError::BehindCamera { depth: p_cam.z, min_depth: k.min_depth });
    }
    let pixel = Vector2::new(k.fx * p_cam.x / p_cam.z + k.cx, k.fy * p_cam.y / p_cam.z + k.cy);
    Ok(Projection { pixel, in_bounds: k.in_bounds(&pixel) })
}

/// Jacobian of the pixel with respect to the camera-frame point.
pub fn projection_jacobian(p_cam: &Vector3<f64>, k: &CameraIntrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p_cam.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p_cam.x * iz2, 0.0, k.fy * iz, -k.fy * p_cam.y * iz2)
}
