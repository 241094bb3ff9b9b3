//! Position-based visual servoing of a simulated arm toward a goal given in
//! the camera frame.
//!
//! Each control cycle estimates `T^c_b`, maps the goal into the base frame,
//! solves inverse kinematics and moves the joints part of the way there.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, so3_exp, so3_log, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::kinematics::{fk_frames, frame_jacobian, keypoints_3d, JointConfig, KinematicsError, RobotModel};
use crate::perception::{predict_keypoints, rescale_keypoints, PerceptionParams};
use crate::pnp::{pnp_solve, Correspondences};
use crate::synthgen::{derive_seed, sample_scene, Ranges, SynthError, MAX_TRIES};

pub const CONTROL_HZ: f64 = 120.0;
/// Control cycles per estimator refresh (30 Hz at 120 Hz control).
pub const ESTIMATE_EVERY: u64 = 4;
/// Joint speed limit in rad/s (or m/s for prismatic joints).
pub const MAX_JOINT_RATE: f64 = 1.0;
pub const IK_POSITION_TOL: f64 = 1e-5;
pub const IK_ORIENTATION_TOL: f64 = 1e-4;
pub const IK_MAX_ITERATIONS: usize = 500;
/// Best position error above which a target counts as outside the workspace.
pub const IK_UNREACHABLE: f64 = 1e-2;
const IK_DAMPING: f64 = 1e-2;
const IK_MAX_STEP: f64 = 0.5;
const IK_RESTARTS: usize = 8;

#[derive(Debug, Error)]
pub enum PbvsError {
    #[error("target unreachable: best position error {0:.4} m")]
    Unreachable(f64),
    #[error("non-finite target pose")]
    InvalidTarget,
    #[error("invalid servo settings: {0}")]
    InvalidConfig(String),
    #[error("estimator failed: {0}")]
    Estimator(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Scene(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    pub converged: bool,
    pub position_error: f64,
    /// Reported but not driven to zero for arms with fewer than six joints.
    pub orientation_error: f64,
    pub iterations: usize,
}

fn pose_errors(target: &Pose, current: &Pose) -> (Vec3, Vec3) {
    (target.translation - current.translation, so3_log(&(target.rotation * current.rotation.transpose())))
}

/// Damped-least-squares inverse kinematics of the end-effector frame.
///
/// Arms with six or more joints track position and orientation; smaller arms
/// track position only. If the run from `q0` does not converge, the solver
/// restarts from a fixed set of configurations spread over the joint limits.
pub fn ik_solve(model: &RobotModel, target: &Pose, q0: &JointConfig) -> Result<IkSolution, PbvsError> {
    if !target.translation.iter().chain(target.rotation.iter()).all(|v| v.is_finite()) {
        return Err(PbvsError::InvalidTarget);
    }
    model.check_config(q0)?;
    let mut best = dls_run(model, target, q0)?;
    for i in 1..=IK_RESTARTS {
        if best.converged {
            break;
        }
        let seed = restart_seed(model, i);
        let sol = dls_run(model, target, &seed)?;
        if ik_score(model, &sol) < ik_score(model, &best) {
            best = sol;
        }
    }
    if best.position_error > IK_UNREACHABLE {
        return Err(PbvsError::Unreachable(best.position_error));
    }
    Ok(best)
}

fn ik_score(model: &RobotModel, s: &IkSolution) -> f64 {
    if s.converged {
        return 0.0;
    }
    if model.dof() >= 6 { s.position_error + s.orientation_error } else { s.position_error }
}

/// Halton point `i` scaled into the joint limits.
fn restart_seed(model: &RobotModel, i: usize) -> JointConfig {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let q = model
        .limits()
        .iter()
        .enumerate()
        .map(|(j, &(lo, hi))| {
            let base = PRIMES[j % PRIMES.len()];
            let (mut f, mut r, mut n) = (1.0, 0.0, i);
            while n > 0 {
                f /= base as f64;
                r += f * (n % base) as f64;
                n /= base;
            }
            lo + r * (hi - lo)
        })
        .collect();
    JointConfig(q)
}

fn dls_run(model: &RobotModel, target: &Pose, q0: &JointConfig) -> Result<IkSolution, PbvsError> {
    let ee = model.end_effector_frame();
    let full = model.dof() >= 6;
    let mut q = q0.clone();
    let mut best: Option<IkSolution> = None;
    for iter in 0..=IK_MAX_ITERATIONS {
        let (pose, jac) = frame_jacobian(model, &q, ee)?;
        let (ep, er) = pose_errors(target, &pose);
        let (pe, re) = (ep.norm(), er.norm());
        let converged = pe < IK_POSITION_TOL && (!full || re < IK_ORIENTATION_TOL);
        let sol = IkSolution { q: q.clone(), converged, position_error: pe, orientation_error: re, iterations: iter };
        if best.as_ref().is_none_or(|b| ik_score(model, &sol) < ik_score(model, b)) {
            best = Some(sol);
        }
        if converged || iter == IK_MAX_ITERATIONS {
            break;
        }
        let (j, e) = if full {
            (jac, DVector::from_iterator(6, er.iter().chain(ep.iter()).copied()))
        } else {
            (jac.rows(3, 3).into_owned(), DVector::from_column_slice(ep.as_slice()))
        };
        let jjt = &j * j.transpose() + DMatrix::identity(j.nrows(), j.nrows()) * (IK_DAMPING * IK_DAMPING);
        let Some(y) = jjt.cholesky().map(|c| c.solve(&e)) else { break };
        let mut dq = j.transpose() * y;
        let n = dq.norm();
        if n > IK_MAX_STEP {
            dq *= IK_MAX_STEP / n;
        }
        let next: Vec<f64> = q.0.iter().zip(dq.iter()).map(|(a, b)| a + b).collect();
        let next = model.clamp_config(&JointConfig(next));
        if next == q {
            break;
        }
        q = next;
    }
    Ok(best.expect("at least one iteration"))
}

/// What an estimator can observe: the simulated scene at the current instant.
pub struct Observation<'a> {
    pub model: &'a RobotModel,
    pub q: &'a JointConfig,
    /// Ground-truth `T^c_b`, used only to synthesize the observation.
    pub cam_pose_true: &'a Pose,
}

pub trait PoseEstimator {
    /// Estimated `T^c_b`.
    fn estimate(&mut self, obs: &Observation) -> Result<Pose, PbvsError>;
}

/// Returns the true camera-to-robot pose.
pub struct GroundTruthEstimator;

impl PoseEstimator for GroundTruthEstimator {
    fn estimate(&mut self, obs: &Observation) -> Result<Pose, PbvsError> {
        Ok(*obs.cam_pose_true)
    }
}

/// The true pose shifted by a fixed camera-frame translation.
pub struct BiasedEstimator {
    pub offset: Vec3,
}

impl BiasedEstimator {
    /// Bias of the given length along the camera x axis.
    pub fn new(meters: f64) -> Self {
        Self { offset: Vec3::new(meters, 0.0, 0.0) }
    }
}

impl PoseEstimator for BiasedEstimator {
    fn estimate(&mut self, obs: &Observation) -> Result<Pose, PbvsError> {
        Ok(Pose::from_translation(self.offset).compose(obs.cam_pose_true))
    }
}

/// Keypoint detector with trained shared offsets, followed by PnP.
///
/// A synthetic observation places each heatmap bump at the true keypoint
/// projection plus the detector's systematic error; the learned per-channel
/// offsets are then applied and keypoints are read out by spatial softmax.
#[derive(Debug, Clone)]
pub struct CtrnetEstimator {
    pub intrinsics: CameraIntrinsics,
    /// Detector error before correction, in heatmap pixels per channel.
    pub detector_gap: Vec<Vec2>,
    pub offsets: Vec<Vec2>,
    pub log_sharpness: Vec<f64>,
    pub heatmap_width: usize,
    pub heatmap_height: usize,
    pub temperature: f64,
    warm: Option<Pose>,
}

impl CtrnetEstimator {
    /// Uses the shared offsets of trained parameters and the mean per-channel sharpness.
    pub fn from_params(
        params: &PerceptionParams,
        intrinsics: CameraIntrinsics,
        detector_gap: Vec<Vec2>,
        temperature: f64,
    ) -> Result<Self, PbvsError> {
        let n = params.n_keypoints;
        if detector_gap.len() != n || params.n_scenes == 0 {
            return Err(PbvsError::InvalidConfig(format!(
                "{} gap entries for {n} keypoints over {} scenes",
                detector_gap.len(),
                params.n_scenes
            )));
        }
        let offsets = (0..n).map(|j| Vec2::new(params.theta_bb[2 * j], params.theta_bb[2 * j + 1])).collect();
        let log_sharpness = (0..n)
            .map(|j| (0..params.n_scenes).map(|s| params.kp_block(s)[3 * j + 2]).sum::<f64>() / params.n_scenes as f64)
            .collect();
        Ok(Self {
            intrinsics,
            detector_gap,
            offsets,
            log_sharpness,
            heatmap_width: params.width,
            heatmap_height: params.height,
            temperature,
            warm: None,
        })
    }

    /// Corrected 2D keypoints in image pixels.
    pub fn detect(&self, obs: &Observation) -> Result<Vec<Vec2>, PbvsError> {
        let k = &self.intrinsics;
        let to_heat = self.heatmap_width as f64 / k.width as f64;
        let projected = keypoints_3d(obs.model, obs.q)?
            .iter()
            .map(|p| project_point(&obs.cam_pose_true.transform_point(p), k))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PbvsError::Estimator(e.to_string()))?;
        if projected.iter().any(|p| !k.contains(p)) {
            return Err(PbvsError::Estimator("keypoint outside the image".into()));
        }
        if projected.len() != self.detector_gap.len() {
            return Err(PbvsError::Estimator("keypoint count differs from the detector".into()));
        }
        let centers: Vec<Vec2> =
            rescale_keypoints(&projected, to_heat).iter().zip(&self.detector_gap).map(|(c, g)| c + g).collect();
        let mut params = PerceptionParams::from_centers(&[centers], 0.0, self.heatmap_width, self.heatmap_height);
        for (j, (o, s)) in self.offsets.iter().zip(&self.log_sharpness).enumerate() {
            params.theta_bb[2 * j] = o.x;
            params.theta_bb[2 * j + 1] = o.y;
            params.theta_kp[3 * j + 2] = *s;
        }
        let kp = predict_keypoints(&params, 0, self.temperature).map_err(|e| PbvsError::Estimator(e.to_string()))?;
        Ok(rescale_keypoints(&kp, 1.0 / to_heat))
    }
}

impl PoseEstimator for CtrnetEstimator {
    fn estimate(&mut self, obs: &Observation) -> Result<Pose, PbvsError> {
        let kp = self.detect(obs)?;
        let c = Correspondences::new(kp, keypoints_3d(obs.model, obs.q)?).map_err(|e| PbvsError::Estimator(e.to_string()))?;
        let sol = pnp_solve(&c, &self.intrinsics, self.warm.as_ref()).map_err(|e| PbvsError::Estimator(e.to_string()))?;
        self.warm = Some(sol.pose);
        Ok(sol.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CameraMotion {
    Static,
    /// Camera circles the base z axis at `rate` rad/s.
    Orbit { rate: f64 },
}

impl CameraMotion {
    pub const DEFAULT_ORBIT_RATE: f64 = 0.05;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    pub gain: f64,
    pub control_hz: f64,
    pub estimate_every: u64,
    pub max_joint_rate: f64,
    pub camera_motion: CameraMotion,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gain: 0.5,
            control_hz: CONTROL_HZ,
            estimate_every: ESTIMATE_EVERY,
            max_joint_rate: MAX_JOINT_RATE,
            camera_motion: CameraMotion::Static,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), PbvsError> {
        let bad = |m: &str| Err(PbvsError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.gain) {
            return bad("gain must lie in [0, 1]");
        }
        if !(self.control_hz > 0.0) || self.estimate_every == 0 || !(self.max_joint_rate > 0.0) {
            return bad("control rate, refresh cadence and joint rate must be positive");
        }
        if let CameraMotion::Orbit { rate } = self.camera_motion {
            if !rate.is_finite() {
                return bad("orbit rate must be finite");
            }
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.control_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoState {
    pub q: JointConfig,
    /// Goal `T^c_g`, fixed in the camera frame.
    pub goal_cam: Pose,
    /// Simulated ground-truth `T^c_b`.
    pub cam_pose_true: Pose,
    pub t: f64,
    /// Control cycles taken so far.
    pub step: u64,
    /// Latest estimate of `T^c_b`.
    pub estimate: Option<Pose>,
    /// Latest IK solution, used to warm-start the next one.
    pub q_goal: Option<JointConfig>,
}

impl ServoState {
    pub fn new(q: JointConfig, goal_cam: Pose, cam_pose_true: Pose) -> Self {
        Self { q, goal_cam, cam_pose_true, t: 0.0, step: 0, estimate: None, q_goal: None }
    }

    /// Translational and rotational distance of the end-effector to the goal, in the true camera frame.
    pub fn errors(&self, model: &RobotModel) -> Result<(f64, f64), PbvsError> {
        let ee = fk_frames(model, &self.q)?[model.end_effector_frame()];
        let cam_ee = self.cam_pose_true.compose(&ee);
        Ok((cam_ee.translation_distance_to(&self.goal_cam), cam_ee.rotation_angle_to(&self.goal_cam)))
    }
}

/// Goal in the base frame implied by an estimate: `T^b_g = E^-1 T^c_g`.
pub fn base_goal(estimate: &Pose, goal_cam: &Pose) -> Pose {
    estimate.inverse().compose(goal_cam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ServoState,
    pub fault: Option<String>,
}

/// One control cycle. Estimator or IK failures hold the joints for the cycle
/// and are reported as a fault.
pub fn servo_step(
    model: &RobotModel,
    state: &ServoState,
    estimator: &mut dyn PoseEstimator,
    cfg: &ServoConfig,
) -> Result<StepOutcome, PbvsError> {
    cfg.validate()?;
    model.check_config(&state.q)?;
    let mut next = state.clone();
    let mut fault = None;

    let refresh = state.estimate.is_none() || state.step.is_multiple_of(cfg.estimate_every);
    if refresh {
        let obs = Observation { model, q: &state.q, cam_pose_true: &state.cam_pose_true };
        match estimator.estimate(&obs) {
            Ok(e) => next.estimate = Some(e),
            Err(e) => fault = Some(e.to_string()),
        }
    }
    if fault.is_none() {
        if let Some(est) = next.estimate {
            let goal = base_goal(&est, &state.goal_cam);
            let seed = state.q_goal.as_ref().unwrap_or(&state.q);
            match ik_solve(model, &goal, seed) {
                Ok(sol) => {
                    let max_step = cfg.max_joint_rate * cfg.period();
                    let q: Vec<f64> = state
                        .q
                        .0
                        .iter()
                        .zip(&sol.q.0)
                        .map(|(a, b)| a + (cfg.gain * (b - a)).clamp(-max_step, max_step))
                        .collect();
                    next.q = model.clamp_config(&JointConfig(q));
                    next.q_goal = Some(sol.q);
                }
                Err(e) => fault = Some(e.to_string()),
            }
        }
    }

    next.step += 1;
    next.t = next.step as f64 * cfg.period();
    if let CameraMotion::Orbit { rate } = cfg.camera_motion {
        let spin = Pose::from_rotation(so3_exp(&Vec3::new(0.0, 0.0, -rate * cfg.period())));
        next.cam_pose_true = state.cam_pose_true.compose(&spin);
    }
    Ok(StepOutcome { state: next, fault })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub translational_err: f64,
    pub rotational_err: f64,
    pub q: Vec<f64>,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServoTrace {
    pub samples: Vec<TraceSample>,
}

impl ServoTrace {
    pub fn final_translational_err(&self) -> Option<f64> {
        self.samples.last().map(|s| s.translational_err)
    }

    pub fn faults(&self) -> usize {
        self.samples.iter().filter(|s| s.fault.is_some()).count()
    }

    /// Columns `t, trans_err, rot_err`.
    pub fn write_csv(&self, path: &Path) -> Result<(), PbvsError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,trans_err,rot_err")?;
        for s in &self.samples {
            writeln!(f, "{},{},{}", s.t, s.translational_err, s.rotational_err)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Distance-to-goal over time as a line plot.
    pub fn save_plot(&self, path: &Path) -> Result<(), PbvsError> {
        let (w, h, margin) = (640u32, 360u32, 30u32);
        let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
        let axis = image::Rgb([0, 0, 0]);
        draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
        draw_line(&mut img, (margin, margin), (margin, h - margin), axis);
        let t_max = self.samples.last().map_or(1.0, |s| s.t).max(f64::MIN_POSITIVE);
        let e_max = self.samples.iter().map(|s| s.translational_err).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let to_px = |s: &TraceSample| {
            let x = margin as f64 + s.t / t_max * (w - 2 * margin) as f64;
            let y = (h - margin) as f64 - s.translational_err / e_max * (h - 2 * margin) as f64;
            (x.round() as u32, y.round() as u32)
        };
        for pair in self.samples.windows(2) {
            draw_line(&mut img, to_px(&pair[0]), to_px(&pair[1]), image::Rgb([30, 90, 200]));
        }
        img.save(path)?;
        Ok(())
    }
}

fn draw_line(img: &mut image::RgbImage, a: (u32, u32), b: (u32, u32), color: image::Rgb<u8>) {
    let (x0, y0, x1, y1) = (a.0 as i64, a.1 as i64, b.0 as i64, b.1 as i64);
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn sample(model: &RobotModel, state: &ServoState, fault: Option<String>) -> Result<TraceSample, PbvsError> {
    let (te, re) = state.errors(model)?;
    Ok(TraceSample { t: state.t, translational_err: te, rotational_err: re, q: state.q.0.clone(), fault })
}

/// Runs the loop for `duration` seconds, recording the initial state and every cycle.
pub fn run_servo(
    model: &RobotModel,
    initial: &ServoState,
    estimator: &mut dyn PoseEstimator,
    cfg: &ServoConfig,
    duration: f64,
) -> Result<ServoTrace, PbvsError> {
    if !(duration > 0.0) {
        return Err(PbvsError::InvalidConfig("duration must be positive".into()));
    }
    cfg.validate()?;
    let steps = (duration * cfg.control_hz).round() as usize;
    let mut trace = ServoTrace { samples: Vec::with_capacity(steps + 1) };
    let mut state = initial.clone();
    trace.samples.push(sample(model, &state, None)?);
    for _ in 0..steps {
        let out = servo_step(model, &state, estimator, cfg)?;
        state = out.state;
        trace.samples.push(sample(model, &state, out.fault)?);
    }
    Ok(trace)
}

/// A servo episode. Start configuration and camera come from a synthetic
/// scene; the goal is the end-effector pose at a configuration drawn from
/// `goal_ranges` whose keypoints stay `margin_px` inside the image.
pub fn sample_trial(
    model: &RobotModel,
    k: &CameraIntrinsics,
    seed: u64,
    ranges: &Ranges,
    goal_ranges: &[(f64, f64)],
    margin_px: f64,
) -> Result<ServoState, PbvsError> {
    if goal_ranges.len() != model.dof() || goal_ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(PbvsError::InvalidConfig(format!("{} goal ranges for {} joints", goal_ranges.len(), model.dof())));
    }
    let scene = sample_scene(model, k, derive_seed(seed, 0), ranges)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let inside = |p: &Vec2| {
        p.x >= margin_px && p.y >= margin_px && p.x <= (k.width - 1) as f64 - margin_px && p.y <= (k.height - 1) as f64 - margin_px
    };
    for _ in 0..MAX_TRIES {
        let qg = JointConfig(goal_ranges.iter().map(|&(lo, hi)| if lo < hi { rng.random_range(lo..=hi) } else { lo }).collect());
        let visible = keypoints_3d(model, &qg)?
            .iter()
            .all(|p| project_point(&scene.gt_pose.transform_point(p), k).map(|uv| inside(&uv)).unwrap_or(false));
        if visible {
            let goal = scene.gt_pose.compose(&fk_frames(model, &qg)?[model.end_effector_frame()]);
            return Ok(ServoState::new(scene.q, goal, scene.gt_pose));
        }
    }
    Err(SynthError::SamplingExhausted(MAX_TRIES).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{planar_two_link, reference_arm};

    fn ee(model: &RobotModel, q: &JointConfig) -> Pose {
        fk_frames(model, q).unwrap()[model.end_effector_frame()]
    }

    fn camera() -> Pose {
        crate::synthgen::look_at(&Vec3::new(1.3, 0.4, 0.8), &Vec3::new(0.2, 0.0, 0.3), &Vec3::z(), 0.0).inverse()
    }

    #[test]
    fn trials_are_seeded_and_visible() {
        use crate::reference::{planar_goal_ranges, planar_scene_ranges, reference_goal_ranges, reference_intrinsics};
        let k = reference_intrinsics();
        let arm = reference_arm();
        let a = sample_trial(&arm, &k, 3, &Ranges::default(), &reference_goal_ranges(), 2.0).unwrap();
        let b = sample_trial(&arm, &k, 3, &Ranges::default(), &reference_goal_ranges(), 2.0).unwrap();
        assert_eq!(a, b);
        let planar = planar_two_link();
        for seed in 0..5 {
            let t = sample_trial(&planar, &k, seed, &planar_scene_ranges(), &planar_goal_ranges(), 2.0).unwrap();
            let tr = run_servo(&planar, &t, &mut GroundTruthEstimator, &ServoConfig::default(), 5.0).unwrap();
            assert!(tr.final_translational_err().unwrap() < 1e-3, "seed {seed}");
        }
        assert!(sample_trial(&arm, &k, 3, &Ranges::default(), &planar_goal_ranges(), 2.0).is_err());
    }

    #[test]
    fn ik_fixed_point() {
        let arm = reference_arm();
        let q = JointConfig(vec![0.3, -0.4, 0.9]);
        let sol = ik_solve(&arm, &ee(&arm, &q), &q).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.q, q);
    }

    #[test]
    fn ik_planar_round_trip() {
        let arm = planar_two_link();
        let target = Pose::from_translation(Vec3::new(1.0, 1.0, 0.0));
        let sol = ik_solve(&arm, &target, &JointConfig(vec![0.1, 0.5])).unwrap();
        assert!(sol.converged);
        let p = ee(&arm, &sol.q).translation;
        assert!((p - target.translation).norm() < 1e-5);
    }

    #[test]
    fn ik_unreachable() {
        let arm = planar_two_link();
        let target = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0));
        assert!(matches!(ik_solve(&arm, &target, &JointConfig(vec![0.1, 0.5])), Err(PbvsError::Unreachable(_))));
        let mut bad = target;
        bad.translation.x = f64::NAN;
        assert!(matches!(ik_solve(&arm, &bad, &JointConfig(vec![0.1, 0.5])), Err(PbvsError::InvalidTarget)));
    }

    #[test]
    fn goal_at_current_pose_holds_still() {
        let arm = reference_arm();
        let q = JointConfig(vec![0.2, -0.3, 0.7]);
        let cam = camera();
        let state = ServoState::new(q.clone(), cam.compose(&ee(&arm, &q)), cam);
        let out = servo_step(&arm, &state, &mut GroundTruthEstimator, &ServoConfig::default()).unwrap();
        let dq: f64 = out.state.q.0.iter().zip(&q.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dq < 1e-9);
        assert!(out.fault.is_none());
        assert!((out.state.t - 1.0 / 120.0).abs() < 1e-15);
    }

    fn reaching_state(arm: &RobotModel) -> ServoState {
        let cam = camera();
        let goal = cam.compose(&ee(arm, &JointConfig(vec![0.6, -0.6, 1.1])));
        ServoState::new(JointConfig(vec![-0.2, -0.1, 0.4]), goal, cam)
    }

    #[test]
    fn ground_truth_converges_monotonically() {
        let arm = reference_arm();
        let trace = run_servo(&arm, &reaching_state(&arm), &mut GroundTruthEstimator, &ServoConfig::default(), 5.0).unwrap();
        let errs: Vec<f64> = trace.samples.iter().map(|s| s.translational_err).collect();
        assert!(errs[0] > 0.1);
        assert!(*errs.last().unwrap() < 1e-3);
        // the IK target itself is only within IK_POSITION_TOL of the goal
        for w in errs.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-12 || w[0] < IK_POSITION_TOL, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(trace.faults(), 0);
    }

    #[test]
    fn biased_estimator_settles_at_bias() {
        let arm = reference_arm();
        let trace = run_servo(&arm, &reaching_state(&arm), &mut BiasedEstimator::new(0.2), &ServoConfig::default(), 5.0).unwrap();
        let e = trace.final_translational_err().unwrap();
        assert!((e - 0.2).abs() < 2e-3, "{e}");
    }

    #[test]
    fn zero_gain_holds_joints() {
        let arm = reference_arm();
        let init = reaching_state(&arm);
        let cfg = ServoConfig { gain: 0.0, ..Default::default() };
        let trace = run_servo(&arm, &init, &mut GroundTruthEstimator, &cfg, 0.5).unwrap();
        assert!(trace.samples.iter().all(|s| s.q == init.q.0));
        let e0 = trace.samples[0].translational_err;
        assert!(trace.samples.iter().all(|s| s.translational_err == e0));
    }

    #[test]
    fn orbiting_camera_tracks_goal() {
        let arm = reference_arm();
        let cfg = ServoConfig { camera_motion: CameraMotion::Orbit { rate: CameraMotion::DEFAULT_ORBIT_RATE }, ..Default::default() };
        let trace = run_servo(&arm, &reaching_state(&arm), &mut GroundTruthEstimator, &cfg, 8.0).unwrap();
        let late = trace.samples.iter().filter(|s| s.t >= 5.0).map(|s| s.translational_err).fold(0.0, f64::max);
        assert!(late < 5e-3, "{late}");
    }

    #[test]
    fn estimator_failure_holds_joints() {
        struct Failing;
        impl PoseEstimator for Failing {
            fn estimate(&mut self, _: &Observation) -> Result<Pose, PbvsError> {
                Err(PbvsError::Estimator("no detections".into()))
            }
        }
        let arm = reference_arm();
        let init = reaching_state(&arm);
        let out = servo_step(&arm, &init, &mut Failing, &ServoConfig::default()).unwrap();
        assert_eq!(out.state.q, init.q);
        assert!(out.fault.unwrap().contains("no detections"));
    }

    #[test]
    fn goal_frame_identity() {
        let est = Pose { rotation: so3_exp(&Vec3::new(0.3, -0.2, 0.5)), translation: Vec3::new(0.1, -0.4, 1.3) };
        let goal = Pose { rotation: so3_exp(&Vec3::new(-0.1, 0.7, 0.2)), translation: Vec3::new(0.3, 0.2, 1.1) };
        let back = est.compose(&base_goal(&est, &goal));
        assert!((back.translation - goal.translation).norm() < 1e-14);
        assert!((back.rotation - goal.rotation).norm() < 1e-14);
    }

    #[test]
    fn trace_outputs() {
        let arm = reference_arm();
        let trace = run_servo(&arm, &reaching_state(&arm), &mut GroundTruthEstimator, &ServoConfig::default(), 0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trace.write_csv(&dir.path().join("trace.csv")).unwrap();
        trace.save_plot(&dir.path().join("trace.png")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(text.lines().count(), trace.samples.len() + 1);
        assert!(text.starts_with("t,trans_err,rot_err"));
    }

    #[test]
    fn invalid_settings() {
        let arm = reference_arm();
        let init = reaching_state(&arm);
        let cfg = ServoConfig { gain: 1.5, ..Default::default() };
        assert!(run_servo(&arm, &init, &mut GroundTruthEstimator, &cfg, 1.0).is_err());
        assert!(run_servo(&arm, &init, &mut GroundTruthEstimator, &ServoConfig::default(), 0.0).is_err());
    }
}
