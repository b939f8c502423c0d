//! Reprojection and odometry residuals with analytic Jacobians.
//!
//! Poses are perturbed on the left: `t_cw ← exp(δ) ∘ t_cw`, `δ = (rho, phi)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix6, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    hat, left_jacobian_inv_se3, log_se3, project_point, projection_jacobian, CameraIntrinsics, GeometryError, Pose3,
    Twist6,
};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Fixed information matrices of the visual and odometry factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationMatrices {
    pub omega_vis: Matrix2<f64>,
    pub omega_odo: Matrix6<f64>,
}

impl InformationMatrices {
    /// `omega_vis = I / σ_px²`, `omega_odo = diag(1/σ_t² ×3, 1/σ_r² ×3)`.
    pub fn from_sigmas(pixel_sigma: f64, trans_sigma: f64, rot_sigma: f64) -> Self {
        let mut omega_odo = Matrix6::zeros();
        for i in 0..3 {
            omega_odo[(i, i)] = 1.0 / (trans_sigma * trans_sigma);
            omega_odo[(i + 3, i + 3)] = 1.0 / (rot_sigma * rot_sigma);
        }
        Self { omega_vis: Matrix2::identity() / (pixel_sigma * pixel_sigma), omega_odo }
    }

    pub fn is_valid(&self) -> bool {
        let sym = (self.omega_vis - self.omega_vis.transpose()).abs().max() == 0.0
            && (self.omega_odo - self.omega_odo.transpose()).abs().max() == 0.0;
        sym && self.omega_vis.cholesky().is_some() && self.omega_odo.cholesky().is_some()
    }
}

/// `project(t_cw · landmark) − pixel`.
pub fn reprojection_residual(
    t_cw: &Pose3,
    landmark: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    let p = project_point(&t_cw.transform_point(landmark), k)?;
    Ok(p.pixel - pixel)
}

/// Residual plus Jacobians with respect to the pose perturbation and the
/// landmark position. No depth check beyond `z > 0`.
pub fn reprojection_jacobians(
    t_cw: &Pose3,
    landmark: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let pc = t_cw.transform_point(landmark);
    if !(pc.z > 1e-9) {
        return None;
    }
    let r = Vector2::new(k.fx * pc.x / pc.z + k.cx - pixel.x, k.fy * pc.y / pc.z + k.cy - pixel.y);
    let jp = projection_jacobian(&pc, k);
    let mut dp = SMatrix::<f64, 3, 6>::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&pc)));
    Some((r, jp * dp, jp * t_cw.rotation_matrix()))
}

/// Camera-frame relative motion `T_{C_prev C_curr}` implied by two odometry
/// poses of the body and the body-to-camera extrinsic.
pub fn odometry_camera_motion(odom_prev: &Pose3, odom_curr: &Pose3, t_bc: &Pose3) -> Pose3 {
    t_bc.inverse().compose(&odom_prev.inverse().compose(odom_curr)).compose(t_bc)
}

/// `log(inverse(t_rel_odo) ∘ t_cw_prev ∘ inverse(t_cw_curr))`.
pub fn odometry_residual(t_rel_odo: &Pose3, t_cw_prev: &Pose3, t_cw_curr: &Pose3) -> Result<Twist6, GeometryError> {
    log_se3(&t_rel_odo.inverse().compose(t_cw_prev).compose(&t_cw_curr.inverse()))
}

/// Residual and Jacobians with respect to left perturbations of `t_cw_prev`
/// and `t_cw_curr`.
pub fn odometry_jacobians(
    t_rel_odo: &Pose3,
    t_cw_prev: &Pose3,
    t_cw_curr: &Pose3,
) -> Result<(Twist6, Matrix6<f64>, Matrix6<f64>), GeometryError> {
    let a = t_rel_odo.inverse();
    let e_pose = a.compose(t_cw_prev).compose(&t_cw_curr.inverse());
    let e = log_se3(&e_pose)?;
    let jl_inv = left_jacobian_inv_se3(&e);
    Ok((e, jl_inv * a.adjoint(), -jl_inv * e_pose.adjoint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_se3;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, angle: f64, trans: f64) -> Pose3 {
        let v = Vector6::from_fn(
            |i, _| {
                if i < 3 {
                    rng.random_range(-trans..trans)
                } else {
                    rng.random_range(-angle..angle)
                }
            },
        );
        exp_se3(&Twist6::from_vector(&v))
    }

    #[test]
    fn exact_observation_has_zero_residual() {
        let k = CameraIntrinsics::default();
        let x = Vector3::new(0.3, -0.2, 4.0);
        let px = project_point(&x, &k).unwrap().pixel;
        assert_eq!(reprojection_residual(&Pose3::identity(), &x, &px, &k).unwrap(), Vector2::zeros());
        let off = px - Vector2::new(1.0, 0.0);
        assert_eq!(reprojection_residual(&Pose3::identity(), &x, &off, &k).unwrap(), Vector2::new(1.0, 0.0));
        let behind = Vector3::new(0.0, 0.0, -1.0);
        assert!(reprojection_residual(&Pose3::identity(), &behind, &px, &k).is_err());
    }

    #[test]
    fn reprojection_matches_independent_projection() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = random_pose(&mut rng, 0.3, 0.5);
            let x = t.inverse().transform_point(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            ));
            let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            // Homogeneous-matrix route.
            let ph = t.to_homogeneous() * x.push(1.0);
            let u = k.fx * ph.x / ph.z + k.cx;
            let v = k.fy * ph.y / ph.z + k.cy;
            let r = reprojection_residual(&t, &x, &pixel, &k).unwrap();
            assert!((r - Vector2::new(u - pixel.x, v - pixel.y)).norm() < 1e-9);
        }
    }

    #[test]
    fn odometry_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = random_pose(&mut rng, 1.0, 2.0);
        let curr = random_pose(&mut rng, 1.0, 2.0);
        let rel = prev.compose(&curr.inverse());
        let e = odometry_residual(&rel, &prev, &curr).unwrap();
        assert!(e.norm() < 1e-12);

        let shifted = Pose3::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let e = odometry_residual(&shifted, &Pose3::identity(), &Pose3::identity()).unwrap();
        assert!((e.rho.norm() - 0.1).abs() < 1e-15);
        assert_eq!(e.phi, Vector3::zeros());
    }

    #[test]
    fn odometry_residual_of_perturbation_matches_matrix_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let prev = random_pose(&mut rng, 1.0, 2.0);
            let curr = random_pose(&mut rng, 1.0, 2.0);
            let rel = prev.compose(&curr.inverse());
            let delta = random_pose(&mut rng, 0.2, 0.2);
            let perturbed = delta.compose(&curr);
            let e = odometry_residual(&rel, &prev, &perturbed).unwrap();
            // inv(rel)·prev·inv(curr)·inv(delta) = conjugation of inv(delta) by inv(rel)·prev·inv(curr) = I,
            // so the error is inv(delta) itself.
            let m = rel.to_homogeneous().try_inverse().unwrap()
                * prev.to_homogeneous()
                * perturbed.to_homogeneous().try_inverse().unwrap();
            let expected = log_se3(&Pose3::from_homogeneous(&m)).unwrap();
            assert!((e.to_vector() - expected.to_vector()).abs().max() < 1e-9);
            let direct = log_se3(&delta.inverse()).unwrap();
            assert!((e.to_vector() - direct.to_vector()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn information_from_sigmas() {
        let o = InformationMatrices::from_sigmas(2.0, 0.1, 0.01);
        assert_eq!(o.omega_vis[(0, 0)], 0.25);
        assert!((o.omega_odo[(0, 0)] - 100.0).abs() < 1e-9);
        assert!((o.omega_odo[(5, 5)] - 1e4).abs() < 1e-6);
        assert!(o.is_valid());
    }

    fn fd_check(analytic: &nalgebra::DMatrix<f64>, numeric: &nalgebra::DMatrix<f64>) -> f64 {
        (analytic - numeric).norm() / numeric.norm().max(1e-12)
    }

    #[test]
    fn jacobians_match_central_differences() {
        let k = CameraIntrinsics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..200 {
            let t = random_pose(&mut rng, 0.5, 1.0);
            let x = t.inverse().transform_point(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            ));
            let px = Vector2::new(300.0, 200.0);
            let (_, jp, jl) = reprojection_jacobians(&t, &x, &px, &k).unwrap();
            let mut num = nalgebra::DMatrix::zeros(2, 6);
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let plus = reprojection_residual(&exp_se3(&Twist6::from_vector(&d)).compose(&t), &x, &px, &k).unwrap();
                let minus =
                    reprojection_residual(&exp_se3(&Twist6::from_vector(&-d)).compose(&t), &x, &px, &k).unwrap();
                num.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(fd_check(&nalgebra::DMatrix::from_column_slice(2, 6, jp.as_slice()), &num) < 1e-5);
            let mut num = nalgebra::DMatrix::zeros(2, 3);
            for i in 0..3 {
                let mut d = Vector3::zeros();
                d[i] = h;
                let plus = reprojection_residual(&t, &(x + d), &px, &k).unwrap();
                let minus = reprojection_residual(&t, &(x - d), &px, &k).unwrap();
                num.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(fd_check(&nalgebra::DMatrix::from_column_slice(2, 3, jl.as_slice()), &num) < 1e-5);
        }
    }

    #[test]
    fn odometry_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..200 {
            let prev = random_pose(&mut rng, 1.5, 3.0);
            let curr = random_pose(&mut rng, 1.5, 3.0);
            let noise = random_pose(&mut rng, 0.3, 0.3);
            let rel = noise.compose(&prev).compose(&curr.inverse());
            let (_, j_prev, j_curr) = odometry_jacobians(&rel, &prev, &curr).unwrap();
            let mut num_prev = nalgebra::DMatrix::zeros(6, 6);
            let mut num_curr = nalgebra::DMatrix::zeros(6, 6);
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = h;
                let up = exp_se3(&Twist6::from_vector(&d));
                let dn = exp_se3(&Twist6::from_vector(&-d));
                let plus = odometry_residual(&rel, &up.compose(&prev), &curr).unwrap().to_vector();
                let minus = odometry_residual(&rel, &dn.compose(&prev), &curr).unwrap().to_vector();
                num_prev.set_column(i, &((plus - minus) / (2.0 * h)));
                let plus = odometry_residual(&rel, &prev, &up.compose(&curr)).unwrap().to_vector();
                let minus = odometry_residual(&rel, &prev, &dn.compose(&curr)).unwrap().to_vector();
                num_curr.set_column(i, &((plus - minus) / (2.0 * h)));
            }
            assert!(fd_check(&nalgebra::DMatrix::from_column_slice(6, 6, j_prev.as_slice()), &num_prev) < 1e-5);
            assert!(fd_check(&nalgebra::DMatrix::from_column_slice(6, 6, j_curr.as_slice()), &num_curr) < 1e-5);
        }
    }
}
