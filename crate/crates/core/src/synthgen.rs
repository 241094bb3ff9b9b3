//! Synthetic scene generation and dataset directories.
//!
//! A scene is stored as `(q, gt_pose, seed)` only; keypoint and mask labels
//! are regenerated on load.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::{project_point, so3_exp, CameraIntrinsics, GeometryError, Mat3, Pose, Vec2, Vec3};
use crate::grid::{GridError, ImageGrid};
use crate::kinematics::{assemble_camera_mesh, keypoints_3d, JointConfig, KinematicsError, RobotModel};
use crate::softrender::{render_silhouette, RenderConfig, RenderError};

pub const MAX_TRIES: usize = 100;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no valid scene after {0} tries")]
    SamplingExhausted(usize),
    #[error("invalid randomization ranges: {0}")]
    InvalidRanges(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// Scene randomization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ranges {
    /// Per-joint sampling interval; `None` uses the model limits.
    pub joint_ranges: Option<Vec<(f64, f64)>>,
    /// Camera distance from the keypoint centroid (meters).
    pub r_min: f64,
    pub r_max: f64,
    /// Camera elevation above the base xy-plane (radians).
    pub elevation: (f64, f64),
    /// Maximum absolute roll about the optical axis (radians).
    pub max_roll: f64,
}

impl Default for Ranges {
    fn default() -> Self {
        Self { joint_ranges: None, r_min: 1.2, r_max: 1.5, elevation: (0.15, 1.0), max_roll: 0.3 }
    }
}

impl Ranges {
    pub fn validate(&self, model: &RobotModel) -> Result<(), SynthError> {
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max.is_finite()) {
            return Err(SynthError::InvalidRanges(format!("camera distance [{}, {}]", self.r_min, self.r_max)));
        }
        if !(self.elevation.0 <= self.elevation.1) || self.max_roll < 0.0 {
            return Err(SynthError::InvalidRanges("elevation or roll".into()));
        }
        let limits = model.limits();
        if let Some(jr) = &self.joint_ranges {
            if jr.len() != limits.len() {
                return Err(SynthError::InvalidRanges(format!("{} joint ranges for {} joints", jr.len(), limits.len())));
            }
            for (i, ((lo, hi), (llo, lhi))) in jr.iter().zip(&limits).enumerate() {
                if lo > hi || lo < llo || hi > lhi {
                    return Err(SynthError::InvalidRanges(format!("joint {i} range outside limits")));
                }
            }
        } else if limits.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
            return Err(SynthError::InvalidRanges("unbounded joints need explicit ranges".into()));
        }
        Ok(())
    }

    fn joint_ranges(&self, model: &RobotModel) -> Vec<(f64, f64)> {
        self.joint_ranges.clone().unwrap_or_else(|| model.limits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub q: JointConfig,
    pub gt_pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub gt_keypoints2d: Vec<Vec2>,
    pub gt_mask: ImageGrid,
    pub seed: u64,
}

/// Per-sample seed derived from the dataset seed and sample index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// Camera-in-world pose looking from `eye` at `target`, rolled about the optical axis.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3, roll: f64) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    let r = Mat3::from_columns(&[x, y, z]) * so3_exp(&Vec3::new(0.0, 0.0, roll));
    Pose { rotation: r, translation: *eye }
}

pub fn sample_scene(model: &RobotModel, k: &CameraIntrinsics, seed: u64, ranges: &Ranges) -> Result<SceneSample, SynthError> {
    ranges.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint_ranges = ranges.joint_ranges(model);
    let r = rng.random_range(ranges.r_min..=ranges.r_max);
    for _ in 0..MAX_TRIES {
        let q = JointConfig(joint_ranges.iter().map(|&(lo, hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo }).collect());
        let azimuth = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (e0, e1) = ranges.elevation;
        // uniform on the spherical band between the two elevations
        let elevation = rng.random_range(e0.sin()..=e1.sin()).asin();
        let roll = rng.random_range(-ranges.max_roll..=ranges.max_roll);

        let kp = keypoints_3d(model, &q)?;
        let target = kp.iter().sum::<Vec3>() / kp.len() as f64;
        let dir = Vec3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
        let cam = look_at(&(target + dir * r), &target, &Vec3::z(), roll);
        let pose = cam.inverse();

        let visible = kp.iter().all(|p| {
            let pc = pose.transform_point(p);
            project_point(&pc, k).map(|uv| k.contains(&uv)).unwrap_or(false)
        });
        if !visible {
            continue;
        }
        let mut sample = SceneSample {
            q,
            gt_pose: pose,
            intrinsics: *k,
            gt_keypoints2d: Vec::new(),
            gt_mask: ImageGrid::zeros(0, 0),
            seed,
        };
        let (kp2, mask) = generate_labels(&sample, model, &RenderConfig::default())?;
        sample.gt_keypoints2d = kp2;
        sample.gt_mask = mask;
        return Ok(sample);
    }
    Err(SynthError::SamplingExhausted(MAX_TRIES))
}

/// Keypoint labels by projection and a mask label by rendering at the ground-truth pose.
pub fn generate_labels(sample: &SceneSample, model: &RobotModel, cfg: &RenderConfig) -> Result<(Vec<Vec2>, ImageGrid), SynthError> {
    let kp = keypoints_3d(model, &sample.q)?
        .iter()
        .map(|p| project_point(&sample.gt_pose.transform_point(p), &sample.intrinsics))
        .collect::<Result<Vec<_>, _>>()?;
    let mesh = assemble_camera_mesh(model, &sample.q, &sample.gt_pose)?;
    let mask = render_silhouette(&mesh.mesh, &sample.intrinsics, cfg)?.binarized(0.5);
    Ok((kp, mask))
}

/// Samples `n` scenes with per-index seeds derived from `master`.
pub fn generate_scenes(
    model: &RobotModel,
    k: &CameraIntrinsics,
    master: u64,
    n: usize,
    ranges: &Ranges,
    exec: Execution,
) -> Result<Vec<SceneSample>, SynthError> {
    exec.map_indices(n, |i| sample_scene(model, k, derive_seed(master, i as u64), ranges))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Robot description file, relative to the dataset directory.
    pub robot: String,
    pub intrinsics: CameraIntrinsics,
    pub ranges: Ranges,
    pub render: RenderConfig,
    pub master_seed: u64,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub q: JointConfig,
    pub gt_pose: Pose,
    pub seed: u64,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub model: RobotModel,
    pub scenes: Vec<SceneSample>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| SynthError::Json { path: path.to_owned(), source })?;
    fs::write(path, text + "\n").map_err(|source| SynthError::Io { path: path.to_owned(), source })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.to_owned(), source })?;
    serde_json::from_str(&text).map_err(|source| SynthError::Json { path: path.to_owned(), source })
}

/// Writes a self-contained dataset directory and returns the written file paths.
#[allow(clippy::too_many_arguments)]
pub fn write_dataset(
    dir: &Path,
    model: &RobotModel,
    scenes: &[SceneSample],
    ranges: &Ranges,
    render: &RenderConfig,
    master_seed: u64,
    with_masks: bool,
) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_owned(), source })?;
    let robot_path = model.save(dir, "robot")?;
    let mut written = vec![robot_path];
    let mut names = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("sample_{i}.json");
        let path = dir.join(&name);
        write_json(&path, &SampleRecord { q: s.q.clone(), gt_pose: s.gt_pose, seed: s.seed })?;
        written.push(path);
        names.push(name);
        if with_masks {
            let path = dir.join(format!("mask_{i}.png"));
            s.gt_mask.save_png(&path)?;
            written.push(path);
        }
    }
    let intrinsics = scenes.first().map(|s| s.intrinsics).unwrap_or_else(crate::reference::reference_intrinsics);
    let manifest = DatasetManifest {
        robot: "robot.json".into(),
        intrinsics,
        ranges: ranges.clone(),
        render: *render,
        master_seed,
        samples: names,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

/// Loads a dataset directory, regenerating labels from the stored poses.
pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let model = RobotModel::load(&dir.join(&manifest.robot))?;
    let mut scenes = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        let rec: SampleRecord = read_json(&dir.join(name))?;
        model.check_config(&rec.q)?;
        let mut s = SceneSample {
            q: rec.q,
            gt_pose: rec.gt_pose,
            intrinsics: manifest.intrinsics,
            gt_keypoints2d: Vec::new(),
            gt_mask: ImageGrid::zeros(0, 0),
            seed: rec.seed,
        };
        let (kp, mask) = generate_labels(&s, &model, &manifest.render)?;
        s.gt_keypoints2d = kp;
        s.gt_mask = mask;
        scenes.push(s);
    }
    Ok(Dataset { manifest, model, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{planar_two_link, reference_arm, reference_intrinsics};

    #[test]
    fn deterministic_and_visible() {
        let arm = reference_arm();
        let k = reference_intrinsics();
        let a = sample_scene(&arm, &k, 7, &Ranges::default()).unwrap();
        let b = sample_scene(&arm, &k, 7, &Ranges::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.gt_keypoints2d.iter().all(|p| k.contains(p)));
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vec3::new(1.0, 2.0, 1.5);
        let target = Vec3::new(0.1, -0.2, 0.3);
        let cam = look_at(&eye, &target, &Vec3::z(), 0.4);
        let pc = cam.inverse().transform_point(&target);
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12);
        assert!((pc.z - (target - eye).norm()).abs() < 1e-12);
    }

    #[test]
    fn planar_arm_labels_by_hand() {
        let arm = planar_two_link();
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        // camera 4 m above the base looking down the -z axis
        let pose = Pose::new(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)), Vec3::new(-1.0, 0.0, 4.0)).unwrap();
        let s = SceneSample {
            q: JointConfig::zeros(2),
            gt_pose: pose,
            intrinsics: k,
            gt_keypoints2d: vec![],
            gt_mask: ImageGrid::zeros(0, 0),
            seed: 0,
        };
        let (kp, _) = generate_labels(&s, &arm, &RenderConfig::default()).unwrap();
        // keypoints at base-frame x = 0, 1, 2 map to camera x = -1, 0, 1 at depth 4
        let expect = [25.0, 50.0, 75.0];
        for (p, u) in kp.iter().zip(expect) {
            assert!((p.x - u).abs() < 1e-12 && (p.y - 50.0).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn invalid_ranges() {
        let arm = reference_arm();
        let k = reference_intrinsics();
        let bad = Ranges { r_min: 2.0, r_max: 1.0, ..Default::default() };
        assert!(matches!(sample_scene(&arm, &k, 0, &bad), Err(SynthError::InvalidRanges(_))));
        let bad = Ranges { joint_ranges: Some(vec![(-5.0, 0.0), (0.0, 0.1), (0.0, 0.1)]), ..Default::default() };
        assert!(matches!(sample_scene(&arm, &k, 0, &bad), Err(SynthError::InvalidRanges(_))));
    }

    #[test]
    fn exhausted_when_camera_too_close() {
        let arm = reference_arm();
        let k = reference_intrinsics();
        let close = Ranges { r_min: 0.05, r_max: 0.05, ..Default::default() };
        assert!(matches!(sample_scene(&arm, &k, 3, &close), Err(SynthError::SamplingExhausted(MAX_TRIES))));
    }

    #[test]
    fn dataset_round_trip() {
        let arm = reference_arm();
        let k = reference_intrinsics();
        let scenes = generate_scenes(&arm, &k, 11, 3, &Ranges::default(), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &arm, &scenes, &Ranges::default(), &RenderConfig::default(), 11, true).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.scenes, scenes);
        assert!(dir.path().join("mask_2.png").exists());
    }
}
