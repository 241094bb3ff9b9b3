//! Rigid-body pose algebra, the SE(3) exponential chart, and pinhole projection.
//!
//! Pose updates use a left perturbation: `pose.retract(xi) = exp(xi) * pose`.
//! Tangent vectors are ordered `[omega, v]` whenever they are flattened into
//! a `Vector6`, and every 6-column Jacobian in the crate follows that order.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Matrix2x6 = SMatrix<f64, 2, 6>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Points closer to the image plane than this are rejected by [`project_point`].
pub const Z_MIN: f64 = 1e-6;

/// Below this rotation angle the exp/log coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z:.3e} <= {Z_MIN:e})")]
    BehindCamera { z: f64 },
    #[error("rotation matrix is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// A rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 to within `1e-9`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let dev = orthonormality_deviation(&rotation);
        if dev > 1e-9 {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Self { rotation, translation })
    }

    /// Like [`Pose::new`] with a looser tolerance, projecting the rotation back
    /// onto SO(3). Used for values that went through text serialization.
    pub fn new_projected(rotation: Mat3, translation: Vec3, tol: f64) -> Result<Self, GeometryError> {
        let dev = orthonormality_deviation(&rotation);
        if dev > tol {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Self { rotation: project_to_so3(&rotation), translation })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Left perturbation `exp(xi) * self`.
    pub fn retract(&self, xi: &Tangent) -> Pose {
        se3_exp(xi).compose(self)
    }

    /// Geodesic rotation distance in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// JSON form of a pose: row-major rotation rows and a translation vector.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(d)?;
        let m = Mat3::from_fn(|i, j| r.rotation[i][j]);
        let t = Vec3::from(r.translation);
        // Serialized values round-trip exactly; hand-written ones may carry a few digits.
        Pose::new(m, t)
            .or_else(|_| Pose::new_projected(m, t, 1e-6))
            .map_err(serde::de::Error::custom)
    }
}

/// `max |R^T R - I|` plus the determinant's distance from +1.
pub fn orthonormality_deviation(r: &Mat3) -> f64 {
    let e = r.transpose() * r - Mat3::identity();
    e.amax() + (r.determinant() - 1.0).abs()
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Angle of a rotation matrix in `[0, pi]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    so3_log(r).norm()
}

/// Element of the SE(3) tangent space: axis-angle rotation and translation part.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Tangent {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self { omega: Vec3::new(x[0], x[1], x[2]), v: Vec3::new(x[3], x[4], x[5]) }
    }
}

/// Rodrigues coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = skew(omega);
    Mat3::identity() + w * a + w * w * b
}

/// Axis-angle vector of a rotation matrix, with norm in `[0, pi]`.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let theta = vee.norm().atan2(cos);
    if theta < SMALL_ANGLE {
        // vee = sin(t)/t * omega
        let t2 = theta * theta;
        return vee * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
    }
    if std::f64::consts::PI - theta > 1e-3 {
        return vee * (theta / theta.sin());
    }
    // Near pi: recover the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let mut k = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vec3 = aat.column(k).into();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3); maps `v` to the translation of `exp([omega, v])`.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = skew(omega);
    Mat3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = skew(omega);
    let k = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    Mat3::identity() - w * 0.5 + w * w * k
}

pub fn se3_exp(xi: &Tangent) -> Pose {
    Pose { rotation: so3_exp(&xi.omega), translation: so3_left_jacobian(&xi.omega) * xi.v }
}

pub fn se3_log(pose: &Pose) -> Tangent {
    let omega = so3_log(&pose.rotation);
    Tangent { omega, v: so3_left_jacobian_inv(&omega) * pose.translation }
}

/// Jacobian of `exp(xi) * x` at `xi = 0` with respect to `[omega, v]`.
pub fn point_pose_jacobian(x: &Vec3) -> Matrix3x6 {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(x)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    j
}

/// Pinhole camera parameters in pixels. Pixel `(col, row)` has its center at
/// integer coordinates `(u, v) = (col, row)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = GeometryError;
    fn try_from(r: IntrinsicsRepr) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for IntrinsicsRepr {
    fn from(k: CameraIntrinsics) -> Self {
        IntrinsicsRepr { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same camera with the image and focal lengths scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
        }
    }

    pub fn contains(&self, uv: &Vec2) -> bool {
        uv.x >= -0.5 && uv.y >= -0.5 && uv.x <= self.width as f64 - 0.5 && uv.y <= self.height as f64 - 0.5
    }
}

/// Projects a camera-frame point to pixels.
pub fn project_point(p: &Vec3, k: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    if !(p.z > Z_MIN) {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok(Vec2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Projection together with its 2x3 Jacobian with respect to the camera-frame point.
pub fn project_with_jacobian(p: &Vec3, k: &CameraIntrinsics) -> Result<(Vec2, Matrix2x3<f64>), GeometryError> {
    let uv = project_point(p, k)?;
    let iz = 1.0 / p.z;
    let j = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    );
    Ok((uv, j))
}

/// Projection of `pose * p` and its 2x6 Jacobian with respect to a left
/// perturbation of `pose`.
pub fn project_pose_jacobian(
    pose: &Pose,
    p: &Vec3,
    k: &CameraIntrinsics,
) -> Result<(Vec2, Matrix2x6), GeometryError> {
    let pc = pose.transform_point(p);
    let (uv, jp) = project_with_jacobian(&pc, k)?;
    Ok((uv, jp * point_pose_jacobian(&pc)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn k500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Tangent::zero());
        assert_eq!(p.rotation, Mat3::identity());
        assert_eq!(p.translation, Vec3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = se3_exp(&Tangent::new(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros()));
        let x = p.transform_point(&Vec3::x());
        assert!((x - Vec3::y()).amax() < 1e-15);
        assert_eq!(p.translation, Vec3::zeros());
    }

    #[test]
    fn exp_log_round_trip_fixed() {
        let xi = Tangent::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let back = se3_log(&se3_exp(&xi));
        assert!((back.to_vector() - xi.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn log_near_pi() {
        let axis = Vec3::new(1.0, -2.0, 0.5).normalize();
        for &theta in &[std::f64::consts::PI - 1e-7, std::f64::consts::PI - 1e-4, 3.1] {
            let w = axis * theta;
            let back = so3_log(&so3_exp(&w));
            assert!((back - w).amax() < 1e-6, "theta {theta}: {back:?}");
        }
    }

    #[test]
    fn small_angles_use_series() {
        for &theta in &[0.0, 1e-12, 1e-8, 5e-4, 2e-3] {
            let xi = Tangent::new(Vec3::new(1.0, 0.5, -0.25).normalize() * theta, Vec3::new(0.3, -0.2, 0.1));
            let back = se3_log(&se3_exp(&xi));
            assert!((back.to_vector() - xi.to_vector()).amax() < 1e-13, "theta {theta}: {:e}", (back.to_vector() - xi.to_vector()).amax());
        }
    }

    #[test]
    fn compose_identities() {
        let p = se3_exp(&Tangent::new(Vec3::new(0.3, -0.1, 0.7), Vec3::new(0.5, 0.0, -1.0)));
        let i = Pose::identity();
        assert_eq!(i.compose(&p), p);
        let e = p.inverse().compose(&p);
        assert!((e.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(e.translation.amax() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = k500();
        assert_eq!(project_point(&Vec3::new(0.0, 0.0, 1.0), &k).unwrap(), Vec2::new(320.0, 240.0));
        assert_eq!(project_point(&Vec3::new(0.1, 0.0, 1.0), &k).unwrap(), Vec2::new(370.0, 240.0));
    }

    #[test]
    fn projection_behind_camera() {
        let k = k500();
        assert!(matches!(project_point(&Vec3::new(0.0, 0.0, 0.0), &k), Err(GeometryError::BehindCamera { .. })));
        assert!(matches!(project_point(&Vec3::new(0.0, 0.0, -1.0), &k), Err(GeometryError::BehindCamera { .. })));
        assert!(project_point(&Vec3::new(0.0, 0.0, 2e-6), &k).is_ok());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
        let json = r#"{"fx":500,"fy":500,"cx":320,"cy":240,"width":640,"height":480}"#;
        let k: CameraIntrinsics = serde_json::from_str(json).unwrap();
        assert_eq!(k, k500());
        let bad = r#"{"fx":-1,"fy":500,"cx":320,"cy":240,"width":640,"height":480}"#;
        assert!(serde_json::from_str::<CameraIntrinsics>(bad).is_err());
    }

    #[test]
    fn new_rejects_non_rotation() {
        assert!(Pose::new(Mat3::identity() * 1.01, Vec3::zeros()).is_err());
        let mut flip = Mat3::identity();
        flip[(2, 2)] = -1.0;
        assert!(Pose::new(flip, Vec3::zeros()).is_err());
    }
}
