//! ADD, AUC and PCK.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::kinematics::camera_points_pose_vjp;

/// AUC grid for 3D errors (meters).
pub const ADD_AUC_MAX: f64 = 0.1;
/// AUC grid for 2D errors (pixels).
pub const PCK_AUC_MAX: f64 = 100.0;
pub const AUC_STEPS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no points given")]
    EmptyPoints,
    #[error("no errors given")]
    EmptyInput,
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
}

/// Mean distance between the points mapped by `est` and by `gt`.
pub fn add_metric(est: &Pose, gt: &Pose, points: &[Vec3]) -> Result<f64, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptyPoints);
    }
    Ok(points.iter().map(|p| (est.transform_point(p) - gt.transform_point(p)).norm()).sum::<f64>() / points.len() as f64)
}

/// Gradient of [`add_metric`] with respect to a left perturbation of `est`.
/// Points where both poses agree contribute nothing.
pub fn add_metric_gradient(est: &Pose, gt: &Pose, points: &[Vec3]) -> Result<Vector6<f64>, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptyPoints);
    }
    let n = points.len() as f64;
    let cam: Vec<Vec3> = points.iter().map(|p| est.transform_point(p)).collect();
    let cot: Vec<Vec3> = points
        .iter()
        .zip(&cam)
        .map(|(p, x)| {
            let d = x - gt.transform_point(p);
            let len = d.norm();
            if len > 0.0 {
                d / (len * n)
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    Ok(camera_points_pose_vjp(&cam, &cot))
}

/// `(threshold, fraction of errors <= threshold)` for `threshold = max * k / steps`, `k = 0..=steps`.
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, steps: usize) -> Result<Vec<(f64, f64)>, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(max_threshold > 0.0) || steps == 0 {
        return Err(MetricsError::InvalidThreshold(max_threshold));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok((0..=steps)
        .map(|k| {
            let t = max_threshold * k as f64 / steps as f64;
            let count = sorted.partition_point(|e| *e <= t);
            (t, count as f64 / n)
        })
        .collect())
}

/// Mean of the accuracy curve, in percent.
pub fn auc(errors: &[f64], max_threshold: f64, steps: usize) -> Result<f64, MetricsError> {
    let curve = accuracy_curve(errors, max_threshold, steps)?;
    Ok(100.0 * curve.iter().map(|(_, f)| f).sum::<f64>() / curve.len() as f64)
}

/// Fraction of errors at or below `threshold`.
pub fn pck(errors2d: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if errors2d.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(errors2d.iter().filter(|e| **e <= threshold).count() as f64 / errors2d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Meters.
    pub per_frame_add: Vec<f64>,
    pub mean_add: f64,
    /// Percent, over 0 to 0.1 m.
    pub auc_add: f64,
    pub pck_threshold: f64,
    pub pck_at_threshold: f64,
    /// Percent, over 0 to 100 px.
    pub auc_pck: f64,
    /// Pixels, over all keypoints of all frames.
    pub mean_2d_err: f64,
}

impl MetricReport {
    pub fn new(per_frame_add: Vec<f64>, errors2d: &[f64], pck_threshold: f64) -> Result<Self, MetricsError> {
        if per_frame_add.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let mean_add = per_frame_add.iter().sum::<f64>() / per_frame_add.len() as f64;
        let auc_add = auc(&per_frame_add, ADD_AUC_MAX, AUC_STEPS)?;
        Ok(Self {
            mean_add,
            auc_add,
            pck_threshold,
            pck_at_threshold: pck(errors2d, pck_threshold)?,
            auc_pck: auc(errors2d, PCK_AUC_MAX, AUC_STEPS)?,
            mean_2d_err: errors2d.iter().sum::<f64>() / errors2d.len() as f64,
            per_frame_add,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Tangent};

    #[test]
    fn add_examples() {
        let pts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0)];
        let gt = se3_exp(&Tangent::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 1.0, 0.0)));
        assert_eq!(add_metric(&gt, &gt, &pts).unwrap(), 0.0);
        let shifted = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0)).compose(&gt);
        assert!((add_metric(&shifted, &gt, &pts).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(add_metric(&gt, &gt, &[]), Err(MetricsError::EmptyPoints));
    }

    #[test]
    fn add_gradient_matches_fd() {
        let pts = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0), Vec3::new(0.4, -0.3, 0.9)];
        let gt = se3_exp(&Tangent::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 1.0, 0.0)));
        let est = gt.retract(&Tangent::new(Vec3::new(0.05, -0.02, 0.03), Vec3::new(0.01, 0.02, -0.03)));
        let g = add_metric_gradient(&est, &gt, &pts).unwrap();
        let f = |x: &[f64]| {
            let xi = Tangent::from_vector(&Vector6::from_column_slice(x));
            add_metric(&est.retract(&xi), &gt, &pts).unwrap()
        };
        assert!(crate::diff::fd_check(f, &[0.0; 6], g.as_slice(), 1e-6).unwrap() < 1e-7);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 0.1, 1000).unwrap(), 100.0);
        assert_eq!(auc(&[0.2, 0.5], 0.1, 1000).unwrap(), 0.0);
        assert!((auc(&[0.02, 0.06], 0.1, 1000).unwrap() - 60.0).abs() < 0.1);
        assert_eq!(auc(&[], 0.1, 10), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn pck_examples() {
        assert_eq!(pck(&[0.0, 0.0, 0.0], 50.0).unwrap(), 1.0);
        assert_eq!(pck(&[10.0, 60.0], 50.0).unwrap(), 0.5);
        assert_eq!(pck(&[], 50.0), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn report_fields() {
        let r = MetricReport::new(vec![0.01, 0.03], &[1.0, 2.0, 3.0, 70.0], 50.0).unwrap();
        assert!((r.mean_add - 0.02).abs() < 1e-15);
        assert_eq!(r.pck_at_threshold, 0.75);
        assert!((r.mean_2d_err - 19.0).abs() < 1e-12);
        assert!((0.0..=100.0).contains(&r.auc_add));
    }
}
