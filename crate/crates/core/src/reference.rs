//! Built-in robots and camera used by the examples, tests and CLI defaults.

use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::kinematics::{rotation_between, Joint, RobotModel, TriangleMesh};
use crate::synthgen::Ranges;

/// Axis-aligned box with each face split into `subdiv x subdiv` quads.
pub fn box_mesh(min: Vec3, max: Vec3, subdiv: usize) -> TriangleMesh {
    let n = subdiv.max(1);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    // (normal axis, sign): faces +x,-x,+y,-y,+z,-z
    for axis in 0..3 {
        for &hi in &[true, false] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = vertices.len();
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = Vec3::zeros();
                    p[axis] = if hi { max[axis] } else { min[axis] };
                    p[a] = min[a] + (max[a] - min[a]) * i as f64 / n as f64;
                    p[b] = min[b] + (max[b] - min[b]) * j as f64 / n as f64;
                    vertices.push(p);
                }
            }
            let idx = |i: usize, j: usize| base + i * (n + 1) + j;
            for i in 0..n {
                for j in 0..n {
                    let (p00, p10, p01, p11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                    if hi {
                        triangles.push([p00, p10, p11]);
                        triangles.push([p00, p11, p01]);
                    } else {
                        triangles.push([p00, p11, p10]);
                        triangles.push([p00, p01, p11]);
                    }
                }
            }
        }
    }
    TriangleMesh { vertices, triangles }
}

/// Closed cylinder between `a` and `b`.
pub fn cylinder_mesh(a: Vec3, b: Vec3, radius: f64, segments: usize) -> TriangleMesh {
    let axis = (b - a).normalize();
    let rot = rotation_between(&Vec3::z(), &axis);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for k in 0..segments {
        let phi = std::f64::consts::TAU * k as f64 / segments as f64;
        let ring = rot * Vec3::new(radius * phi.cos(), radius * phi.sin(), 0.0);
        vertices.push(a + ring);
        vertices.push(b + ring);
    }
    let ca = vertices.len();
    vertices.push(a);
    vertices.push(b);
    for k in 0..segments {
        let k2 = (k + 1) % segments;
        let (a0, b0, a1, b1) = (2 * k, 2 * k + 1, 2 * k2, 2 * k2 + 1);
        triangles.push([a0, a1, b1]);
        triangles.push([a0, b1, b0]);
        triangles.push([ca, a1, a0]);
        triangles.push([ca + 1, b0, b1]);
    }
    TriangleMesh { vertices, triangles }
}

/// Desk-scale 3-DOF revolute arm with thick links: base yaw, shoulder pitch, elbow pitch.
///
/// Frames: 0 base, 1 turret (yaw), 2 upper arm (pitch), 3 upper-arm marker,
/// 4 forearm (pitch), 5 forearm marker, 6 tool. All seven frame origins are
/// keypoints. The lateral offsets keep the keypoints out of a common plane.
pub fn reference_arm() -> RobotModel {
    let t = |x: f64, y: f64, z: f64| Pose::from_translation(Vec3::new(x, y, z));
    let joints = vec![
        Joint::revolute(Vec3::z(), t(0.0, 0.0, 0.14), (-2.6, 2.6)),
        Joint::revolute(Vec3::y(), t(0.0, 0.11, 0.14), (-1.5, 0.5)),
        Joint::fixed(t(0.18, -0.08, 0.11)),
        Joint::revolute(Vec3::y(), t(0.18, -0.04, -0.11), (-2.2, 2.2)),
        Joint::fixed(t(0.16, 0.0, 0.1)),
        Joint::fixed(t(0.16, 0.0, -0.1)),
    ];
    let meshes = vec![
        cylinder_mesh(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.14), 0.15, 24),
        box_mesh(Vec3::new(-0.1, -0.1, -0.0), Vec3::new(0.1, 0.1, 0.2), 2),
        box_mesh(Vec3::new(-0.07, -0.11, -0.11), Vec3::new(0.4, 0.11, 0.11), 2),
        TriangleMesh::default(),
        box_mesh(Vec3::new(-0.06, -0.1, -0.1), Vec3::new(0.35, 0.1, 0.1), 2),
        TriangleMesh::default(),
        box_mesh(Vec3::new(-0.03, -0.1, -0.06), Vec3::new(0.1, 0.1, 0.06), 2),
    ];
    RobotModel::new(joints, meshes, (0..7).collect()).expect("reference arm is valid")
}

/// Two unit-length links rotating about z, with the tool frame at the tip.
pub fn planar_two_link() -> RobotModel {
    let joints = vec![
        Joint::revolute(Vec3::z(), Pose::identity(), (-3.2, 3.2)),
        Joint::revolute(Vec3::z(), Pose::from_translation(Vec3::x()), (-3.2, 3.2)),
        Joint::fixed(Pose::from_translation(Vec3::x())),
    ];
    let link = |len: f64| box_mesh(Vec3::new(0.0, -0.05, -0.05), Vec3::new(len, 0.05, 0.05), 1);
    RobotModel::new(joints, vec![TriangleMesh::default(), link(1.0), link(1.0)], vec![1, 2, 3])
        .expect("planar arm is valid")
}

/// Servo goal intervals for the reference arm. The elbow stays bent so goals
/// keep a margin from the workspace boundary.
pub fn reference_goal_ranges() -> Vec<(f64, f64)> {
    vec![(-2.0, 2.0), (-1.0, 0.3), (0.5, 1.6)]
}

/// Servo goal intervals for the planar arm.
pub fn planar_goal_ranges() -> Vec<(f64, f64)> {
    vec![(-3.0, 3.0), (0.5, 2.5)]
}

/// Scene ranges that fit the two-meter planar arm in the reference camera.
pub fn planar_scene_ranges() -> Ranges {
    Ranges { r_min: 4.0, r_max: 4.5, elevation: (1.2, 1.5), ..Ranges::default() }
}

/// 64 x 64 pinhole camera used at desk scale.
pub fn reference_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(80.0, 80.0, 31.5, 31.5, 64, 64).expect("valid intrinsics")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_arm_shape() {
        let arm = reference_arm();
        assert_eq!(arm.dof(), 3);
        assert_eq!(arm.n_keypoints(), 7);
        let tris = arm.total_triangles();
        assert!((250..=400).contains(&tris), "{tris} triangles");
    }

    #[test]
    fn box_faces_point_outward() {
        let m = box_mesh(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 2);
        for t in &m.triangles {
            let [a, b, c] = t.map(|i| m.vertices[i]);
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0);
        }
        let c = cylinder_mesh(Vec3::zeros(), Vec3::z(), 0.5, 12);
        c.validate().unwrap();
        m.validate().unwrap();
    }
}
