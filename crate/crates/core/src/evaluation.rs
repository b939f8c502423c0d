//! Absolute trajectory error against ground truth.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;
use thiserror::Error;

use crate::geometry::{Pose2, Pose3};
use crate::planarloc::PoseSource;
use crate::simworld::GroundTruthSample;

pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimate lies within {max_dt} s of a ground-truth sample")]
    NoOverlap { max_dt: f64 },
    #[error("timestamps must be sorted")]
    Unsorted,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One estimated body pose in the map frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub source: PoseSource,
    pub pose: Pose3,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    source: PoseSource,
    x: f64,
    y: f64,
    z: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

pub fn write_trajectory_csv(path: &Path, samples: &[TrajectorySample]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        let [x, y, z, qx, qy, qz, qw] = s.pose.to_array7();
        w.serialize(TrajectoryRow { t: s.t, source: s.source, x, y, z, qx, qy, qz, qw })?;
    }
    w.flush()
}

pub fn read_trajectory_csv(path: &Path) -> io::Result<Vec<TrajectorySample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TrajectoryRow>()
        .map(|row| {
            let row = row.map_err(io::Error::other)?;
            let pose =
                Pose3::from_array7([row.x, row.y, row.z, row.qx, row.qy, row.qz, row.qw]).map_err(io::Error::other)?;
            Ok(TrajectorySample { t: row.t, source: row.source, pose })
        })
        .collect()
}

/// Ground-truth body poses expressed relative to `anchor` (the body pose at
/// the start of the mapping session, which defines the map frame).
pub fn ground_truth_in_map(gt: &[GroundTruthSample], anchor: &Pose3) -> Vec<(f64, Vector3<f64>)> {
    let inv = anchor.inverse();
    gt.iter().map(|s| (s.timestamp, *inv.compose(&s.body_pose).translation())).collect()
}

/// Index pairs `(estimate, ground truth)` by nearest timestamp, dropping pairs
/// further apart than `max_dt`.
pub fn associate(est_times: &[f64], gt_times: &[f64], max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    if est_times.windows(2).any(|w| w[1] < w[0]) || gt_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(EvalError::Unsorted);
    }
    let mut pairs = Vec::new();
    for (i, t) in est_times.iter().enumerate() {
        let j = gt_times.partition_point(|g| g < t);
        let best = [j.checked_sub(1), (j < gt_times.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (gt_times[*a] - t).abs().total_cmp(&(gt_times[*b] - t).abs()));
        if let Some(j) = best {
            if (gt_times[j] - t).abs() <= max_dt {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { max_dt });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub est: Vector3<f64>,
    pub gt: Vector3<f64>,
    pub localized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ate_x: f64,
    pub ate_y: f64,
    pub ate_z: f64,
    pub rmse_total: f64,
    pub n_pairs: usize,
    pub visual_coverage: f64,
    pub samples: Vec<ErrorSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub total: f64,
}

/// Serialized form of the report: errors per axis plus coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub ate: AteSummary,
    pub n_pairs: usize,
    pub visual_coverage: f64,
}

impl EvaluationReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            ate: AteSummary { x: self.ate_x, y: self.ate_y, z: self.ate_z, total: self.rmse_total },
            n_pairs: self.n_pairs,
            visual_coverage: self.visual_coverage,
        }
    }
}

/// Per-axis and total RMSE over paired samples. Panics on an empty slice.
pub fn compute_ate(samples: Vec<ErrorSample>) -> EvaluationReport {
    assert!(!samples.is_empty(), "compute_ate needs at least one pair");
    let n = samples.len() as f64;
    let mut sq = Vector3::zeros();
    let mut total = 0.0;
    for s in &samples {
        let d = s.est - s.gt;
        sq += d.component_mul(&d);
        total += d.norm_squared();
    }
    let visual = samples.iter().filter(|s| s.localized).count() as f64;
    EvaluationReport {
        ate_x: (sq.x / n).sqrt(),
        ate_y: (sq.y / n).sqrt(),
        ate_z: (sq.z / n).sqrt(),
        rmse_total: (total / n).sqrt(),
        n_pairs: samples.len(),
        visual_coverage: visual / n,
        samples,
    }
}

/// Least-squares planar rigid transform taking `src` onto `dst`.
pub fn align_se2(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Pose2 {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return Pose2::identity();
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector2<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let yaw = (cov[(1, 0)] - cov[(0, 1)]).atan2(cov[(0, 0)] + cov[(1, 1)]);
    let (sn, cs) = yaw.sin_cos();
    let rotated = Vector2::new(cs * mu_s.x - sn * mu_s.y, sn * mu_s.x + cs * mu_s.y);
    let t = mu_d - rotated;
    Pose2::new(t.x, t.y, yaw)
}

/// Pairs an estimated trajectory with ground truth and computes the ATE,
/// optionally after planar alignment.
pub fn evaluate(
    est: &[TrajectorySample],
    gt: &[(f64, Vector3<f64>)],
    max_dt: f64,
    align: bool,
) -> Result<EvaluationReport, EvalError> {
    let est_t: Vec<f64> = est.iter().map(|s| s.t).collect();
    let gt_t: Vec<f64> = gt.iter().map(|g| g.0).collect();
    let pairs = associate(&est_t, &gt_t, max_dt)?;
    let mut samples: Vec<ErrorSample> = pairs
        .iter()
        .map(|(i, j)| ErrorSample {
            t: est[*i].t,
            est: *est[*i].pose.translation(),
            gt: gt[*j].1,
            localized: est[*i].source == PoseSource::Visual,
        })
        .collect();
    if align {
        let src: Vec<Vector2<f64>> = samples.iter().map(|s| s.est.xy()).collect();
        let dst: Vec<Vector2<f64>> = samples.iter().map(|s| s.gt.xy()).collect();
        let tf = align_se2(&src, &dst);
        for s in &mut samples {
            let p = tf.transform_point(&s.est.xy());
            s.est = Vector3::new(p.x, p.y, s.est.z);
        }
    }
    Ok(compute_ate(samples))
}

#[derive(Debug, Serialize, Deserialize)]
struct PlotRow {
    t: f64,
    est_x: f64,
    est_y: f64,
    est_z: f64,
    gt_x: f64,
    gt_y: f64,
    gt_z: f64,
    localized: u8,
}

/// Per-sample series for plotting: estimate, ground truth and whether the
/// sample came from visual localization.
pub fn export_plot_data(report: &EvaluationReport, path: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &report.samples {
        w.serialize(PlotRow {
            t: s.t,
            est_x: s.est.x,
            est_y: s.est.y,
            est_z: s.est.z,
            gt_x: s.gt.x,
            gt_y: s.gt.y,
            gt_z: s.gt.z,
            localized: s.localized as u8,
        })?;
    }
    w.flush()
}

pub fn read_plot_data(path: &Path) -> io::Result<Vec<ErrorSample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PlotRow>()
        .map(|row| {
            let row = row.map_err(io::Error::other)?;
            Ok(ErrorSample {
                t: row.t,
                est: Vector3::new(row.est_x, row.est_y, row.est_z),
                gt: Vector3::new(row.gt_x, row.gt_y, row.gt_z),
                localized: row.localized != 0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(t: f64, est: Vector3<f64>, gt: Vector3<f64>) -> ErrorSample {
        ErrorSample { t, est, gt, localized: true }
    }

    #[test]
    fn identical_series_pair_fully() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let pairs = associate(&t, &t, DEFAULT_MAX_DT).unwrap();
        assert_eq!(pairs, (0..50).map(|i| (i, i)).collect::<Vec<_>>());
        let shifted: Vec<f64> = t.iter().map(|x| x + 0.5).collect();
        let mut sparse = t.clone();
        sparse.retain(|x| *x < 0.45);
        assert!(matches!(associate(&sparse, &shifted, DEFAULT_MAX_DT), Err(EvalError::NoOverlap { .. })));
    }

    #[test]
    fn jittered_pairing_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<f64> = (0..200).map(|i| i as f64 * 0.1).collect();
        let est: Vec<f64> = gt.iter().map(|t| t + rng.random_range(-0.03..0.03)).collect();
        let pairs = associate(&est, &gt, DEFAULT_MAX_DT).unwrap();
        let brute: Vec<(usize, usize)> = est
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let j = (0..gt.len()).min_by(|a, b| (gt[*a] - t).abs().total_cmp(&(gt[*b] - t).abs())).unwrap();
                ((gt[j] - t).abs() <= DEFAULT_MAX_DT).then_some((i, j))
            })
            .collect();
        assert_eq!(pairs, brute);
        assert!(pairs.len() < est.len());
    }

    #[test]
    fn ate_examples() {
        let p = |x: f64| Vector3::new(x, 2.0 * x, 0.1);
        let r = compute_ate((0..10).map(|i| sample(i as f64, p(i as f64), p(i as f64))).collect());
        assert_eq!((r.ate_x, r.ate_y, r.ate_z, r.rmse_total), (0.0, 0.0, 0.0, 0.0));
        let off = Vector3::new(0.3, 0.0, 0.0);
        let r = compute_ate((0..10).map(|i| sample(i as f64, p(i as f64) + off, p(i as f64))).collect());
        assert!((r.ate_x - 0.3).abs() < 1e-15);
        assert_eq!((r.ate_y, r.ate_z), (0.0, 0.0));
    }

    #[test]
    fn gaussian_errors_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.1).unwrap();
        let samples = (0..10_000)
            .map(|i| {
                let gt = Vector3::new(i as f64, 0.0, 0.0);
                let e = Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                sample(i as f64, gt + e, gt)
            })
            .collect();
        let r = compute_ate(samples);
        for v in [r.ate_x, r.ate_y, r.ate_z] {
            assert!((0.097..=0.103).contains(&v), "{v}");
        }
    }

    #[test]
    fn alignment_removes_rigid_offset() {
        let gt: Vec<(f64, Vector3<f64>)> = (0..40)
            .map(|i| (i as f64 * 0.1, Vector3::new((i as f64 * 0.2).cos() * 2.0, i as f64 * 0.05, 0.0)))
            .collect();
        let tf = Pose2::new(0.4, -0.3, 0.2);
        let est: Vec<TrajectorySample> = gt
            .iter()
            .map(|(t, p)| {
                let q = tf.transform_point(&p.xy());
                TrajectorySample {
                    t: *t,
                    source: PoseSource::Visual,
                    pose: Pose3::from_translation(Vector3::new(q.x, q.y, 0.0)),
                }
            })
            .collect();
        let raw = evaluate(&est, &gt, DEFAULT_MAX_DT, false).unwrap();
        let aligned = evaluate(&est, &gt, DEFAULT_MAX_DT, true).unwrap();
        assert!(raw.rmse_total > 0.3);
        assert!(aligned.rmse_total < 1e-12);
    }

    #[test]
    fn plot_data_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        let samples: Vec<ErrorSample> = (0..5)
            .map(|i| ErrorSample {
                t: i as f64 * 0.1,
                est: Vector3::new(0.1 * i as f64, 0.2, 0.3),
                gt: Vector3::new(0.0, 0.2, 1.0 / 3.0),
                localized: i % 2 == 0,
            })
            .collect();
        let report = compute_ate(samples.clone());
        export_plot_data(&report, &path).unwrap();
        let back = read_plot_data(&path).unwrap();
        assert_eq!(back.len(), report.n_pairs);
        assert_eq!(back, samples);
        assert!((report.visual_coverage - 0.6).abs() < 1e-15);
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let s = vec![
            TrajectorySample { t: 0.1, source: PoseSource::Visual, pose: Pose3::from_planar(1.0, 2.0, 0.0, 0.3) },
            TrajectorySample { t: 0.2, source: PoseSource::Odometry, pose: Pose3::identity() },
        ];
        write_trajectory_csv(&path, &s).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("t,source,x,y,z,qx,qy,qz,qw\n"));
        assert_eq!(read_trajectory_csv(&path).unwrap(), s);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<ErrorSample>> {
        prop::collection::vec((prop::array::uniform3(-10.0f64..10.0), prop::array::uniform3(-1.0f64..1.0)), 1..60)
            .prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (g, e))| {
                        let gt = Vector3::from(g);
                        sample(i as f64, gt + Vector3::from(e), gt)
                    })
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn axes_combine_into_total(samples in arb_samples()) {
            let r = compute_ate(samples);
            let combined = r.ate_x.powi(2) + r.ate_y.powi(2) + r.ate_z.powi(2);
            prop_assert!((combined - r.rmse_total.powi(2)).abs() <= 1e-12 * combined.max(1.0));
            prop_assert!(r.n_pairs >= 1);
        }

        #[test]
        fn zero_error_pair_never_increases(samples in arb_samples(), g in prop::array::uniform3(-5.0f64..5.0)) {
            let before = compute_ate(samples.clone());
            let mut more = samples;
            more.push(sample(1e6, Vector3::from(g), Vector3::from(g)));
            let after = compute_ate(more);
            prop_assert!(after.ate_x <= before.ate_x && after.ate_y <= before.ate_y);
            prop_assert!(after.ate_z <= before.ate_z && after.rmse_total <= before.rmse_total);
        }

        #[test]
        fn invariant_under_common_planar_motion(samples in arb_samples(), m in prop::array::uniform3(-3.0f64..3.0)) {
            let tf = Pose2::new(m[0], m[1], m[2]);
            let apply = |p: Vector3<f64>| {
                let q = tf.transform_point(&p.xy());
                Vector3::new(q.x, q.y, p.z)
            };
            let moved: Vec<ErrorSample> =
                samples.iter().map(|s| ErrorSample { est: apply(s.est), gt: apply(s.gt), ..*s }).collect();
            let a = compute_ate(samples);
            let b = compute_ate(moved);
            prop_assert!((a.rmse_total - b.rmse_total).abs() < 1e-9);
            prop_assert!((a.ate_z - b.ate_z).abs() < 1e-12);
        }
    }
}
