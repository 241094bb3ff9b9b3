//! Articulated robot model, forward kinematics, keypoint placement and
//! camera-frame mesh assembly.
//!
//! Frame 0 is the robot base. Each joint appends one frame, so a model with
//! `m` joints has `m + 1` frames; frame `i` is
//! `frame[i - 1] * origin[i - 1] * motion(q)`. Fixed joints carry no joint
//! value and are used for tool and marker frames.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_exp, Mat3, Pose, Vec3};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint {joint} value {value} outside limits [{lo}, {hi}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("expected {expected} joint values, got {got}")]
    WrongDof { expected: usize, got: usize },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed robot description {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub kind: JointKind,
    /// Unit axis in the joint frame (ignored for fixed joints).
    pub axis: Vec3,
    /// Fixed transform from the parent frame to the joint frame.
    pub origin: Pose,
    pub limits: (f64, f64),
}

impl Joint {
    pub fn revolute(axis: Vec3, origin: Pose, limits: (f64, f64)) -> Self {
        Self { kind: JointKind::Revolute, axis, origin, limits }
    }

    pub fn prismatic(axis: Vec3, origin: Pose, limits: (f64, f64)) -> Self {
        Self { kind: JointKind::Prismatic, axis, origin, limits }
    }

    pub fn fixed(origin: Pose) -> Self {
        Self { kind: JointKind::Fixed, axis: Vec3::z(), origin, limits: (0.0, 0.0) }
    }

    pub fn is_actuated(&self) -> bool {
        self.kind != JointKind::Fixed
    }

    fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => Pose::from_rotation(so3_exp(&(self.axis * q))),
            JointKind::Prismatic => Pose::from_translation(self.axis * q),
            JointKind::Fixed => Pose::identity(),
        }
    }
}

/// Triangle mesh in a link frame (meters).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, KinematicsError> {
        let m = Self { vertices, triangles };
        m.validate()?;
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= self.vertices.len()) {
                return Err(KinematicsError::InvalidMesh(format!("triangle {t} has an out-of-range index")));
            }
            let [a, b, c] = tri.map(|i| self.vertices[i]);
            if 0.5 * (b - a).cross(&(c - a)).norm() <= 1e-12 {
                return Err(KinematicsError::InvalidMesh(format!("triangle {t} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        self.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / n
    }

    /// Appends `other`, reindexing its triangles.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }

    /// Parses `v` and `f` records of an ASCII OBJ file. Faces with more than
    /// three vertices are fan-triangulated; `v/vt/vn` index forms are accepted.
    pub fn from_obj(text: &str) -> Result<Self, KinematicsError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let xyz: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| KinematicsError::InvalidMesh(format!("line {}: {e}", ln + 1)))?;
                    if xyz.len() != 3 {
                        return Err(KinematicsError::InvalidMesh(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                    }
                    vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            first.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1)
                        })
                        .collect::<Option<_>>()
                        .ok_or_else(|| KinematicsError::InvalidMesh(format!("line {}: bad face index", ln + 1)))?;
                    if idx.len() < 3 {
                        return Err(KinematicsError::InvalidMesh(format!("line {}: face needs 3 indices", ln + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }
}

/// Joint values, one per actuated joint (radians or meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub joints: Vec<Joint>,
    /// One mesh per frame; frames without geometry hold an empty mesh.
    pub link_meshes: Vec<TriangleMesh>,
    pub keypoint_frames: Vec<usize>,
}

impl RobotModel {
    pub fn new(joints: Vec<Joint>, mut link_meshes: Vec<TriangleMesh>, keypoint_frames: Vec<usize>) -> Result<Self, KinematicsError> {
        let n_frames = joints.len() + 1;
        if link_meshes.len() > n_frames {
            return Err(KinematicsError::InvalidModel(format!(
                "{} meshes for {} frames",
                link_meshes.len(),
                n_frames
            )));
        }
        link_meshes.resize(n_frames, TriangleMesh::default());
        let model = Self { joints, link_meshes, keypoint_frames };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (i, j) in self.joints.iter().enumerate() {
            if j.is_actuated() {
                if (j.axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(KinematicsError::InvalidModel(format!("joint {i} axis is not unit length")));
                }
                if !(j.limits.0 <= j.limits.1) {
                    return Err(KinematicsError::InvalidModel(format!("joint {i} has empty limits")));
                }
            }
        }
        if self.keypoint_frames.is_empty() {
            return Err(KinematicsError::InvalidModel("no keypoint frames".into()));
        }
        if let Some(&f) = self.keypoint_frames.iter().find(|&&f| f >= self.num_frames()) {
            return Err(KinematicsError::InvalidModel(format!("keypoint frame {f} does not exist")));
        }
        for m in &self.link_meshes {
            m.validate()?;
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoint_frames.len()
    }

    /// Number of actuated joints, i.e. the length of a [`JointConfig`].
    pub fn dof(&self) -> usize {
        self.joints.iter().filter(|j| j.is_actuated()).count()
    }

    /// Lower and upper limits of the actuated joints.
    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().filter(|j| j.is_actuated()).map(|j| j.limits).collect()
    }

    pub fn check_config(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        if q.0.len() != self.dof() {
            return Err(KinematicsError::WrongDof { expected: self.dof(), got: q.0.len() });
        }
        for (i, (&v, (lo, hi))) in q.0.iter().zip(self.limits()).enumerate() {
            if !(v >= lo && v <= hi) {
                return Err(KinematicsError::JointLimit { joint: i, value: v, lo, hi });
            }
        }
        Ok(())
    }

    /// Clamps each joint value into its limits.
    pub fn clamp_config(&self, q: &JointConfig) -> JointConfig {
        JointConfig(q.0.iter().zip(self.limits()).map(|(&v, (lo, hi))| v.clamp(lo, hi)).collect())
    }

    pub fn total_triangles(&self) -> usize {
        self.link_meshes.iter().map(|m| m.triangles.len()).sum()
    }

    /// Index of the last frame, used as the end-effector.
    pub fn end_effector_frame(&self) -> usize {
        self.joints.len()
    }
}

/// Pose of every frame in the base frame.
pub fn fk_frames(model: &RobotModel, q: &JointConfig) -> Result<Vec<Pose>, KinematicsError> {
    model.check_config(q)?;
    Ok(fk_frames_unchecked(model, &q.0))
}

fn fk_frames_unchecked(model: &RobotModel, q: &[f64]) -> Vec<Pose> {
    let mut frames = Vec::with_capacity(model.num_frames());
    let mut current = Pose::identity();
    frames.push(current);
    let mut qi = q.iter();
    for joint in &model.joints {
        let value = if joint.is_actuated() { *qi.next().expect("dof checked") } else { 0.0 };
        current = current.compose(&joint.origin).compose(&joint.motion(value));
        frames.push(current);
    }
    frames
}

/// Keypoints in the base frame: origins of the keypoint frames.
pub fn keypoints_3d(model: &RobotModel, q: &JointConfig) -> Result<Vec<Vec3>, KinematicsError> {
    let frames = fk_frames(model, q)?;
    Ok(model.keypoint_frames.iter().map(|&f| frames[f].translation).collect())
}

/// Robot mesh in the camera frame, with the link each vertex came from.
#[derive(Debug, Clone)]
pub struct CameraMesh {
    pub mesh: TriangleMesh,
    pub vertex_link: Vec<usize>,
}

/// Transforms every link mesh by `pose * fk_frame(link)` and concatenates them.
pub fn assemble_camera_mesh(model: &RobotModel, q: &JointConfig, pose: &Pose) -> Result<CameraMesh, KinematicsError> {
    let frames = fk_frames(model, q)?;
    let mut mesh = TriangleMesh::default();
    let mut vertex_link = Vec::new();
    for (link, (frame, link_mesh)) in frames.iter().zip(&model.link_meshes).enumerate() {
        if link_mesh.is_empty() {
            continue;
        }
        let to_cam = pose.compose(frame);
        mesh.append(&link_mesh.transformed(&to_cam));
        vertex_link.extend(std::iter::repeat_n(link, link_mesh.vertices.len()));
    }
    Ok(CameraMesh { mesh, vertex_link })
}

/// Pulls per-vertex camera-frame cotangents back to the pose tangent.
///
/// Vertices move as `exp(xi) * v`, so each contributes `[v x g, g]`.
pub fn camera_points_pose_vjp(points: &[Vec3], cotangents: &[Vec3]) -> Vector6<f64> {
    let mut out = Vector6::zeros();
    for (v, g) in points.iter().zip(cotangents) {
        let w = v.cross(g);
        out[0] += w.x;
        out[1] += w.y;
        out[2] += w.z;
        out[3] += g.x;
        out[4] += g.y;
        out[5] += g.z;
    }
    out
}

/// 6 x dof geometric Jacobian (rows `[angular; linear]`) of `frame` in the base frame.
pub fn frame_jacobian(model: &RobotModel, q: &JointConfig, frame: usize) -> Result<(Pose, DMatrix<f64>), KinematicsError> {
    let frames = fk_frames(model, q)?;
    let target = frames[frame];
    let mut jac = DMatrix::zeros(6, model.dof());
    let mut col = 0;
    for (i, joint) in model.joints.iter().enumerate() {
        if !joint.is_actuated() {
            continue;
        }
        // Joint i acts between frame i (parent) and frame i + 1.
        if i < frame {
            let joint_frame = frames[i].compose(&joint.origin);
            let axis = joint_frame.rotation * joint.axis;
            match joint.kind {
                JointKind::Revolute => {
                    let lin = axis.cross(&(target.translation - joint_frame.translation));
                    jac.fixed_view_mut::<3, 1>(0, col).copy_from(&axis);
                    jac.fixed_view_mut::<3, 1>(3, col).copy_from(&lin);
                }
                JointKind::Prismatic => {
                    jac.fixed_view_mut::<3, 1>(3, col).copy_from(&axis);
                }
                JointKind::Fixed => unreachable!(),
            }
        }
        col += 1;
    }
    Ok((target, jac))
}

// ---------------------------------------------------------------------------
// Robot description files

#[derive(Serialize, Deserialize)]
struct JointDesc {
    #[serde(rename = "type")]
    kind: JointKind,
    #[serde(default = "default_axis")]
    axis: [f64; 3],
    origin: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<[f64; 2]>,
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Serialize, Deserialize)]
struct RobotDesc {
    joints: Vec<JointDesc>,
    #[serde(default)]
    meshes: Vec<Option<String>>,
    keypoint_frames: Vec<usize>,
}

impl RobotModel {
    /// Loads a JSON robot description; mesh paths are relative to the file.
    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = fs::read_to_string(path).map_err(|source| KinematicsError::Io { path: path.to_owned(), source })?;
        let desc: RobotDesc =
            serde_json::from_str(&text).map_err(|source| KinematicsError::Json { path: path.to_owned(), source })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let joints = desc
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let limits = match (j.kind, j.limits) {
                    (JointKind::Fixed, _) => (0.0, 0.0),
                    (_, Some([lo, hi])) => (lo, hi),
                    (_, None) => (f64::NEG_INFINITY, f64::INFINITY),
                };
                let axis = Vec3::from(j.axis);
                if j.kind != JointKind::Fixed && (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(KinematicsError::InvalidModel(format!("joint {i} axis is not unit length")));
                }
                Ok(Joint { kind: j.kind, axis, origin: j.origin, limits })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let meshes = desc
            .meshes
            .iter()
            .map(|m| match m {
                Some(file) if !file.is_empty() => {
                    let p = dir.join(file);
                    let text = fs::read_to_string(&p).map_err(|source| KinematicsError::Io { path: p.clone(), source })?;
                    TriangleMesh::from_obj(&text)
                }
                _ => Ok(TriangleMesh::default()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        RobotModel::new(joints, meshes, desc.keypoint_frames)
    }

    /// Writes `<stem>.json` plus one `<stem>_link<i>.obj` per non-empty link mesh.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf, KinematicsError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| KinematicsError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut meshes = Vec::new();
        for (i, m) in self.link_meshes.iter().enumerate() {
            if m.is_empty() {
                meshes.push(None);
            } else {
                let name = format!("{stem}_link{i}.obj");
                let p = dir.join(&name);
                fs::write(&p, m.to_obj()).map_err(io(&p))?;
                meshes.push(Some(name));
            }
        }
        while meshes.last() == Some(&None) {
            meshes.pop();
        }
        let desc = RobotDesc {
            joints: self
                .joints
                .iter()
                .map(|j| JointDesc {
                    kind: j.kind,
                    axis: j.axis.into(),
                    origin: j.origin,
                    limits: j.is_actuated().then_some([j.limits.0, j.limits.1]),
                })
                .collect(),
            meshes,
            keypoint_frames: self.keypoint_frames.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&desc).expect("robot description serializes");
        fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }
}

/// Rotation taking `a` onto `b` (both unit), used by mesh builders.
pub(crate) fn rotation_between(a: &Vec3, b: &Vec3) -> Mat3 {
    let axis = a.cross(b);
    let s = axis.norm();
    let c = a.dot(b);
    if s < 1e-12 {
        if c > 0.0 {
            return Mat3::identity();
        }
        let ortho = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        return so3_exp(&(a.cross(&ortho).normalize() * std::f64::consts::PI));
    }
    so3_exp(&(axis / s * s.atan2(c)))
}
