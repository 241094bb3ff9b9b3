//! Perspective-n-point: Levenberg-Marquardt solve on the SE(3) tangent and
//! implicit-function backward pass.
//!
//! The objective is `O(T) = sum_i |o_i - pi(T p_i)|^2` with poses perturbed
//! on the left, `T <- exp(xi) T`. At a stationary point `F = dO/dxi = 0`, so
//!
//! ```text
//! dxi/do = -(dF/dxi)^-1 dF/do,   F = -2 sum_i J_i^T r_i
//! ```
//!
//! with `dF/dxi` replaced by its Gauss-Newton form `2 sum_i J_i^T J_i` and
//! `dF/do_i = -2 J_i^T`.

mod epnp;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_pose_jacobian, se3_exp, so3_exp, CameraIntrinsics, Mat3, Matrix2x6, Pose, Tangent, Vec2, Vec3};

pub use epnp::kabsch;

pub const MAX_ITERATIONS: usize = 100;
/// Convergence requires `|dO/dxi|_inf` below this.
pub const STATIONARITY_TOL: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("invalid correspondences: {0}")]
    InvalidInput(String),
    #[error("solver failed to reduce the reprojection error")]
    Diverged,
    #[error("points are behind the camera at initialization")]
    BehindCamera,
    #[error("Hessian condition number {0:e} exceeds limit")]
    SingularHessian(f64),
    #[error("solution is not converged")]
    NotConverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub points2d: Vec<Vec2>,
    pub points3d: Vec<Vec3>,
}

impl Correspondences {
    pub fn new(points2d: Vec<Vec2>, points3d: Vec<Vec3>) -> Result<Self, PnpError> {
        let c = Self { points2d, points3d };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PnpError> {
        if self.points2d.len() != self.points3d.len() {
            return Err(PnpError::InvalidInput(format!(
                "{} image points vs {} model points",
                self.points2d.len(),
                self.points3d.len()
            )));
        }
        if self.points2d.len() < 4 {
            return Err(PnpError::TooFewPoints(self.points2d.len()));
        }
        let finite = self.points2d.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.points3d.iter().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(PnpError::InvalidInput("non-finite coordinate".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points2d.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnpResult {
    pub pose: Pose,
    /// Sum of squared reprojection errors (pixels squared).
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub planar: bool,
}

/// Residuals `o_i - pi(T p_i)` and the 2x6 Jacobians of `pi(exp(xi) T p_i)`.
/// `None` if any point is not in front of the camera.
pub fn reprojection(c: &Correspondences, k: &CameraIntrinsics, pose: &Pose) -> Option<(Vec<Vec2>, Vec<Matrix2x6>)> {
    let mut res = Vec::with_capacity(c.len());
    let mut jac = Vec::with_capacity(c.len());
    for (p, o) in c.points3d.iter().zip(&c.points2d) {
        let (uv, j) = project_pose_jacobian(pose, p, k).ok()?;
        res.push(o - uv);
        jac.push(j);
    }
    Some((res, jac))
}

/// `O(T)`, or infinity when a point is behind the camera.
pub fn objective(c: &Correspondences, k: &CameraIntrinsics, pose: &Pose) -> f64 {
    c.points3d
        .iter()
        .zip(&c.points2d)
        .map(|(p, o)| match crate::geometry::project_point(&pose.transform_point(p), k) {
            Ok(uv) => (o - uv).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// `F = dO/dxi = -2 sum_i J_i^T r_i`.
pub fn objective_gradient(c: &Correspondences, k: &CameraIntrinsics, pose: &Pose) -> Option<Vector6<f64>> {
    let (res, jac) = reprojection(c, k, pose)?;
    Some(res.iter().zip(&jac).map(|(r, j)| j.transpose() * r * -2.0).sum())
}

fn normal_equations(res: &[Vec2], jac: &[Matrix2x6]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for (r, j) in res.iter().zip(jac) {
        a += j.transpose() * j;
        b += j.transpose() * r;
    }
    (a, b)
}

fn count_behind(c: &Correspondences, pose: &Pose) -> usize {
    c.points3d.iter().filter(|p| pose.transform_point(p).z <= crate::geometry::Z_MIN).count()
}

pub fn pnp_solve(c: &Correspondences, k: &CameraIntrinsics, init: Option<&Pose>) -> Result<PnpResult, PnpError> {
    c.validate()?;
    let (candidates, planar) = epnp::epnp(c, k);
    let starts = match init {
        Some(p) if count_behind(c, p) == c.len() => return Err(PnpError::BehindCamera),
        Some(p) if count_behind(c, p) == 0 => vec![*p],
        // partially behind or absent: refine every closed-form hypothesis
        _ => candidates
            .iter()
            .flat_map(|p| [*p, mirrored(c, p)])
            .filter(|p| count_behind(c, p) == 0)
            .collect(),
    };
    let mut best: Option<Result<PnpResult, PnpError>> = None;
    for start in &starts {
        let r = refine(c, k, start, planar);
        let better = match (&best, &r) {
            (None, _) | (Some(Err(_)), Ok(_)) => true,
            (Some(Ok(b)), Ok(n)) => (n.converged, -n.residual) > (b.converged, -b.residual),
            _ => false,
        };
        if better {
            best = Some(r);
        }
    }
    best.unwrap_or(Err(PnpError::BehindCamera))
}

/// The other side of the depth ambiguity: rotate the points about their
/// centroid so the dominant plane normal is reflected about the line of sight.
fn mirrored(c: &Correspondences, pose: &Pose) -> Pose {
    let pts: Vec<Vec3> = c.points3d.iter().map(|p| pose.transform_point(p)).collect();
    let m = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let cov: Mat3 = pts.iter().map(|p| (p - m) * (p - m).transpose()).sum();
    let eig = SymmetricEigen::new(cov);
    let n = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    let d = m.normalize();
    let flipped = d * (2.0 * n.dot(&d)) - n;
    let axis = n.cross(&flipped);
    let angle = axis.norm().atan2(n.dot(&flipped));
    if axis.norm() < 1e-12 {
        return *pose;
    }
    let r = so3_exp(&(axis.normalize() * angle));
    Pose::from_translation(m).compose(&Pose::from_rotation(r)).compose(&Pose::from_translation(-m)).compose(pose)
}

fn refine(c: &Correspondences, k: &CameraIntrinsics, start: &Pose, planar: bool) -> Result<PnpResult, PnpError> {
    let mut pose = *start;
    let (mut res, mut jac) = reprojection(c, k, &pose).ok_or(PnpError::BehindCamera)?;
    let mut cost: f64 = res.iter().map(|r| r.norm_squared()).sum();
    let initial_cost = cost;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        let (a, b) = normal_equations(&res, &jac);
        let grad_inf = (b * 2.0).amax();
        if grad_inf < STATIONARITY_TOL * 1e-2 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut damped = a;
        for i in 0..6 {
            damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&b)) else {
            lambda *= 10.0;
            continue;
        };
        let step_norm = step.norm();
        let candidate = se3_exp(&Tangent::from_vector(&step)).compose(&pose);
        let new_cost = objective(c, k, &candidate);
        // Close to the optimum the cost stops resolving the decrease; fall back to the gradient.
        let flat_but_better = new_cost <= cost * (1.0 + 1e-9)
            && objective_gradient(c, k, &candidate).is_some_and(|g| g.amax() < grad_inf);
        if new_cost < cost || flat_but_better {
            let decrease = (cost - new_cost).max(0.0);
            pose = candidate;
            cost = new_cost;
            (res, jac) = reprojection(c, k, &pose).expect("accepted pose keeps points in front");
            lambda = (lambda / 10.0).max(1e-12);
            if step_norm < 1e-10 || decrease < 1e-12 {
                let g = objective_gradient(c, k, &pose).expect("points in front");
                if g.amax() < STATIONARITY_TOL {
                    converged = true;
                    break;
                }
            }
        } else {
            lambda *= 10.0;
            if step_norm < 1e-10 || lambda > 1e16 {
                converged = grad_inf < STATIONARITY_TOL;
                break;
            }
        }
    }
    if !cost.is_finite() || (!converged && cost >= initial_cost && initial_cost > 0.0) {
        return Err(PnpError::Diverged);
    }
    Ok(PnpResult { pose, residual: cost, converged, iterations, planar })
}

/// Cotangent on the 2D points (`2n` values, `[u0, v0, u1, v1, ...]`) given a
/// cotangent on the left-perturbation tangent of the solved pose.
pub fn pnp_backward(
    c: &Correspondences,
    k: &CameraIntrinsics,
    result: &PnpResult,
    pose_cotangent: &Vector6<f64>,
) -> Result<Vec<f64>, PnpError> {
    c.validate()?;
    if !result.converged {
        return Err(PnpError::NotConverged);
    }
    let (_, jac) = reprojection(c, k, &result.pose).ok_or(PnpError::BehindCamera)?;
    let mut h = Matrix6::zeros();
    for j in &jac {
        h += j.transpose() * j * 2.0;
    }
    let eig = SymmetricEigen::new(h);
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(PnpError::SingularHessian(cond));
    }
    // v = -(dF/dxi)^-T c, then out_i = (dF/do_i)^T v = -2 J_i v
    let v = -(eig.eigenvectors * (eig.eigenvectors.transpose() * pose_cotangent).component_div(&eig.eigenvalues));
    let mut out = Vec::with_capacity(2 * c.len());
    for j in &jac {
        let g = j * v * -2.0;
        out.push(g.x);
        out.push(g.y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Tangent};
    use crate::reference::reference_intrinsics;

    fn instance() -> (Correspondences, Pose, CameraIntrinsics) {
        let k = reference_intrinsics();
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.3, 0.1, 0.2),
            Vec3::new(-0.2, 0.25, 0.1),
            Vec3::new(0.1, -0.3, 0.35),
            Vec3::new(0.25, 0.2, -0.15),
            Vec3::new(-0.15, -0.1, -0.2),
            Vec3::new(0.05, 0.3, 0.4),
        ];
        let gt = se3_exp(&Tangent::new(Vec3::new(0.2, -0.4, 0.3), Vec3::new(0.05, -0.1, 1.5)));
        let uv = pts.iter().map(|p| crate::geometry::project_point(&gt.transform_point(p), &k).unwrap()).collect();
        (Correspondences::new(uv, pts).unwrap(), gt, k)
    }

    #[test]
    fn recovers_noiseless_pose() {
        let (c, gt, k) = instance();
        let r = pnp_solve(&c, &k, None).unwrap();
        assert!(r.converged);
        assert!(!r.planar);
        assert!(r.pose.rotation_angle_to(&gt) < 1e-9);
        assert!(r.pose.translation_distance_to(&gt) < 1e-9);
    }

    #[test]
    fn init_at_optimum() {
        let (c, gt, k) = instance();
        let r = pnp_solve(&c, &k, Some(&gt)).unwrap();
        assert!(r.converged && r.iterations <= 2 && r.residual < 1e-12, "{r:?}");
    }

    #[test]
    fn too_few_and_behind() {
        let (c, gt, k) = instance();
        let short = Correspondences { points2d: c.points2d[..3].to_vec(), points3d: c.points3d[..3].to_vec() };
        assert_eq!(pnp_solve(&short, &k, None).unwrap_err(), PnpError::TooFewPoints(3));
        let flipped = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        assert_eq!(pnp_solve(&c, &k, Some(&flipped)).unwrap_err(), PnpError::BehindCamera);
        let _ = gt;
    }

    #[test]
    fn planar_points_are_flagged() {
        let k = reference_intrinsics();
        let pts: Vec<Vec3> = (0..6).map(|i| Vec3::new((i % 3) as f64 * 0.2 - 0.2, (i / 3) as f64 * 0.3 - 0.15, 0.0)).collect();
        let gt = se3_exp(&Tangent::new(Vec3::new(0.3, 0.2, 0.1), Vec3::new(0.0, 0.0, 1.2)));
        let uv = pts.iter().map(|p| crate::geometry::project_point(&gt.transform_point(p), &k).unwrap()).collect();
        let r = pnp_solve(&Correspondences::new(uv, pts).unwrap(), &k, None).unwrap();
        assert!(r.planar);
        assert!(r.pose.rotation_angle_to(&gt) < 1e-6);
    }

    #[test]
    fn zero_cotangent_is_zero() {
        let (c, _, k) = instance();
        let r = pnp_solve(&c, &k, None).unwrap();
        let g = pnp_backward(&c, &k, &r, &Vector6::zeros()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn add_loss(pose: &Pose, reference: &Pose, pts: &[Vec3]) -> f64 {
        pts.iter().map(|p| (pose.transform_point(p) - reference.transform_point(p)).norm()).sum::<f64>() / pts.len() as f64
    }

    fn add_cotangent(pose: &Pose, reference: &Pose, pts: &[Vec3]) -> Vector6<f64> {
        let cam: Vec<Vec3> = pts.iter().map(|p| pose.transform_point(p)).collect();
        let g: Vec<Vec3> = pts
            .iter()
            .zip(&cam)
            .map(|(p, x)| (x - reference.transform_point(p)).normalize() / pts.len() as f64)
            .collect();
        crate::kinematics::camera_points_pose_vjp(&cam, &g)
    }

    fn fd_points(c: &Correspondences, k: &CameraIntrinsics, start: &Pose, loss: impl Fn(&Pose) -> f64) -> Vec<f64> {
        let h = 1e-4;
        let mut out = Vec::new();
        for i in 0..c.len() {
            for axis in 0..2 {
                let eval = |d: f64| {
                    let mut cp = c.clone();
                    cp.points2d[i][axis] += d;
                    loss(&pnp_solve(&cp, k, Some(start)).unwrap().pose)
                };
                out.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn implicit_gradient_matches_resolve() {
        let (c, gt, k) = instance();
        let r = pnp_solve(&c, &k, None).unwrap();
        let reference = gt.retract(&Tangent::new(Vec3::new(0.01, 0.02, -0.01), Vec3::new(0.02, -0.01, 0.03)));
        let an = pnp_backward(&c, &k, &r, &add_cotangent(&r.pose, &reference, &c.points3d)).unwrap();
        let fd = fd_points(&c, &k, &r.pose, |p| add_loss(p, &reference, &c.points3d));
        let err = crate::diff::rel_err_inf(&fd, &an);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn duplicated_points_halve_gradient() {
        let (c, _, k) = instance();
        let r = pnp_solve(&c, &k, None).unwrap();
        let cot = Vector6::new(0.3, -0.1, 0.2, 1.0, 0.5, -0.7);
        let g1 = pnp_backward(&c, &k, &r, &cot).unwrap();
        let mut d = c.clone();
        d.points2d.extend(c.points2d.clone());
        d.points3d.extend(c.points3d.clone());
        let r2 = pnp_solve(&d, &k, None).unwrap();
        let g2 = pnp_backward(&d, &k, &r2, &cot).unwrap();
        for (a, b) in g1.iter().zip(&g2[..g1.len()]) {
            assert!((a / 2.0 - b).abs() < 1e-9 * a.abs().max(1e-6), "{a} {b}");
        }
    }

    #[test]
    fn noisy_solution_is_stationary_and_consistent() {
        let (mut c, _, k) = instance();
        for (i, p) in c.points2d.iter_mut().enumerate() {
            *p += Vec2::new(((i * 37) % 7) as f64 * 0.3 - 0.9, ((i * 11) % 5) as f64 * 0.4 - 0.8);
        }
        let r = pnp_solve(&c, &k, None).unwrap();
        assert!(r.converged, "{r:?} {:?}", objective_gradient(&c, &k, &r.pose));
        assert!(objective_gradient(&c, &k, &r.pose).unwrap().amax() < STATIONARITY_TOL);
        let direct: f64 = c
            .points3d
            .iter()
            .zip(&c.points2d)
            .map(|(p, o)| (o - crate::geometry::project_point(&r.pose.transform_point(p), &k).unwrap()).norm_squared())
            .sum();
        assert!((direct - r.residual).abs() < 1e-12);

        let mut rev = c.clone();
        rev.points2d.reverse();
        rev.points3d.reverse();
        let r2 = pnp_solve(&rev, &k, None).unwrap();
        assert!(r2.pose.rotation_angle_to(&r.pose) < 1e-10 && r2.pose.translation_distance_to(&r.pose) < 1e-10);
    }
}
