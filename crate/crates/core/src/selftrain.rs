//! Self-supervised training of the keypoint and mask heads.
//!
//! Per scene: heatmaps -> keypoints -> PnP -> render at the solved pose. The
//! mask loss `sum (S - M)^2` trains the keypoint parameters through the
//! renderer, PnP and spatial softmax (M held constant); a reprojection-
//! weighted cross-entropy trains the mask logits toward the render (S held
//! constant).

use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::{point_pose_jacobian, Pose, Tangent, Vec2, Vec3};
use crate::grid::{GridError, ImageGrid};
use crate::kinematics::{assemble_camera_mesh, keypoints_3d, KinematicsError, RobotModel};
use crate::metrics::add_metric;
use crate::perception::{
    keypoints_vjp, predict_keypoints, rescale_keypoints, MaskImage, MaskMode, MaskProvider, PerceptionError, PerceptionParams,
    SceneGrad,
};
use crate::pnp::{pnp_backward, pnp_solve, Correspondences, PnpError};
use crate::softrender::{RenderConfig, RenderError, SilhouetteImage, SoftRasterizer};
use crate::synthgen::SceneSample;

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
}

/// `sum (S - M)^2` and its cotangent `2 (S - M)` on `S`.
pub fn mask_loss(s: &SilhouetteImage, m: &MaskImage) -> Result<(f64, ImageGrid), GridError> {
    s.check_same_shape(m)?;
    let diff: Vec<f64> = s.data.iter().zip(&m.data).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    Ok((loss, ImageGrid { width: s.width, height: s.height, data: diff.iter().map(|d| 2.0 * d).collect() }))
}

/// `exp(-s * residual)`.
pub fn sample_weight(residual: f64, s: f64) -> f64 {
    (-s * residual).exp()
}

/// `-(w / HW) sum [M log S + (1 - M) log(1 - S)]` with `S` clamped to
/// `[eps, 1 - eps]`, and its cotangent on `M`.
pub fn seg_loss(s: &SilhouetteImage, m: &MaskImage, w: f64) -> Result<(f64, ImageGrid), GridError> {
    s.check_same_shape(m)?;
    let scale = w / s.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.len());
    for (sv, mv) in s.data.iter().zip(&m.data) {
        let sc = sv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let (ls, l1s) = (sc.ln(), (1.0 - sc).ln());
        loss += mv * ls + (1.0 - mv) * l1s;
        grad.push(-scale * (ls - l1s));
    }
    Ok((-scale * loss, ImageGrid { width: s.width, height: s.height, data: grad }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Weight scale in `exp(-s * residual)`.
    pub s: f64,
    pub seed: u64,
    /// Also update the mask logits from the weighted cross-entropy (trainable masks only).
    pub alternation: bool,
    pub mask_mode: MaskMode,
    pub temperature: f64,
    pub render: RenderConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without relative improvement before the learning rate drops tenfold.
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    /// Update the per-scene keypoint heads; when false only the shared offsets learn.
    pub scene_heads: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 200,
            grad_clip: 10.0,
            s: 0.1,
            seed: 0,
            alternation: true,
            mask_mode: MaskMode::Corrupted,
            temperature: crate::perception::DEFAULT_TEMPERATURE,
            render: RenderConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            scene_heads: true,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.s > 0.0) {
            return bad("s must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        self.render.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean over scenes that produced a gradient.
    pub mask_loss: f64,
    pub seg_loss: f64,
    /// Millimeters, against ground truth, over scenes with a PnP solution.
    pub mean_add: f64,
    pub lr: f64,
    pub skipped: Vec<usize>,
}

/// Scenes, robot and masks used for training.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub model: &'a RobotModel,
    pub scenes: &'a [SceneSample],
    pub masks: &'a MaskProvider,
}

/// Everything one scene contributes in an epoch.
#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub grad: SceneGrad,
    pub mask_loss: f64,
    pub seg_loss: f64,
    pub weight: f64,
    pub pose: Pose,
    pub residual: f64,
    pub add: f64,
}

/// Forward and backward pass for one scene. `warm` seeds the PnP solve.
pub fn scene_step(
    params: &PerceptionParams,
    data: &TrainData,
    scene: usize,
    warm: Option<&Pose>,
    cfg: &TrainConfig,
) -> Result<SceneOutcome, TrainError> {
    let sample = data.scenes.get(scene).ok_or(PerceptionError::UnknownScene(scene, data.scenes.len()))?;
    let k = &sample.intrinsics;
    let factor = k.width as f64 / params.width as f64;
    let kp2 = rescale_keypoints(&predict_keypoints(params, scene, cfg.temperature)?, factor);
    let p3: Vec<Vec3> = keypoints_3d(data.model, &sample.q)?;
    let corr = Correspondences::new(kp2, p3.clone())?;
    let sol = pnp_solve(&corr, k, warm)?;
    let add = add_metric(&sol.pose, &sample.gt_pose, &p3).expect("model has keypoints");

    let mesh = assemble_camera_mesh(data.model, &sample.q, &sol.pose)?;
    let raster = SoftRasterizer::new(&mesh.mesh, k, &cfg.render)?;
    let s = raster.forward(cfg.execution);
    let m = data.masks.mask(scene, cfg.mask_mode, params)?;
    let (l_mask, cot_s) = mask_loss(&s, &m)?;

    let vg = raster.backward_vertices(&cot_s, cfg.execution)?;
    let pose_cot: Vector6<f64> = crate::kinematics::camera_points_pose_vjp(&mesh.mesh.vertices, &vg);
    let kp_cot = pnp_backward(&corr, k, &sol, &pose_cot)?;
    let kp_cot: Vec<Vec2> = kp_cot.chunks(2).map(|c| Vec2::new(c[0], c[1]) * factor).collect();
    let mut grad = keypoints_vjp(params, scene, cfg.temperature, &kp_cot)?;

    let weight = sample_weight(sol.residual, cfg.s);
    let (l_seg, cot_m) = seg_loss(&s, &m, weight)?;
    if cfg.alternation && cfg.mask_mode == MaskMode::Trainable {
        // M = sigmoid(logit)
        grad.seg = cot_m.data.iter().zip(&m.data).map(|(g, mv)| g * mv * (1.0 - mv)).collect();
    }

    let norm = grad.norm_squared().sqrt();
    if norm > cfg.grad_clip {
        grad.scale(cfg.grad_clip / norm);
    }
    Ok(SceneOutcome { grad, mask_loss: l_mask, seg_loss: l_seg, weight, pose: sol.pose, residual: sol.residual, add })
}

/// First and second moments plus per-block step counts, so a scene's blocks
/// only advance when that scene is updated.
#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m_kp: Vec<f64>,
    v_kp: Vec<f64>,
    t_kp: Vec<u32>,
    m_bb: Vec<f64>,
    v_bb: Vec<f64>,
    t_bb: u32,
    m_seg: Vec<f64>,
    v_seg: Vec<f64>,
    t_seg: Vec<u32>,
}

fn adam_update(x: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: u32, lr: f64, cfg: &TrainConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PerceptionParams,
    pub epoch: usize,
    pub lr: f64,
    /// Last PnP solution per scene, used to warm-start the next solve.
    pub warm: Vec<Option<Pose>>,
    best_loss: f64,
    stale_epochs: usize,
    adam: Adam,
}

impl TrainState {
    pub fn new(params: PerceptionParams, cfg: &TrainConfig) -> Self {
        let n = params.n_scenes;
        let adam = Adam {
            m_kp: vec![0.0; params.theta_kp.len()],
            v_kp: vec![0.0; params.theta_kp.len()],
            t_kp: vec![0; n],
            m_bb: vec![0.0; params.theta_bb.len()],
            v_bb: vec![0.0; params.theta_bb.len()],
            t_bb: 0,
            m_seg: vec![0.0; params.theta_seg.len()],
            v_seg: vec![0.0; params.theta_seg.len()],
            t_seg: vec![0; n],
        };
        Self { params, epoch: 0, lr: cfg.lr, warm: vec![None; n], best_loss: f64::INFINITY, stale_epochs: 0, adam }
    }

    fn apply(&mut self, g: &SceneGrad, cfg: &TrainConfig) {
        let s = g.scene;
        let lr = self.lr;
        let a = &mut self.adam;
        let len = 3 * self.params.n_keypoints;
        if cfg.scene_heads {
            a.t_kp[s] += 1;
            let r = s * len..(s + 1) * len;
            adam_update(self.params.kp_block_mut(s), &mut a.m_kp[r.clone()], &mut a.v_kp[r], &g.kp, a.t_kp[s], lr, cfg);
        }
        a.t_bb += 1;
        adam_update(&mut self.params.theta_bb, &mut a.m_bb, &mut a.v_bb, &g.bb, a.t_bb, lr, cfg);
        if !g.seg.is_empty() && !self.params.theta_seg.is_empty() {
            let len = self.params.width * self.params.height;
            a.t_seg[s] += 1;
            let r = s * len..(s + 1) * len;
            adam_update(self.params.seg_block_mut(s), &mut a.m_seg[r.clone()], &mut a.v_seg[r], &g.seg, a.t_seg[s], lr, cfg);
        }
    }
}

/// One pass over all scenes. Scene gradients are computed from the
/// parameters at the start of the epoch, then applied in scene order.
/// Scenes whose PnP solve or backward pass fails are skipped and recorded.
pub fn train_epoch(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig) -> Result<TrainRecord, TrainError> {
    cfg.validate()?;
    if data.scenes.len() != state.params.n_scenes || data.masks.len() != data.scenes.len() {
        return Err(TrainError::InvalidConfig("scene count does not match parameters or masks".into()));
    }
    let params = &state.params;
    let warm = &state.warm;
    let outcomes = cfg
        .execution
        .map_indices(data.scenes.len(), |i| scene_step(params, data, i, warm[i].as_ref(), cfg));

    let mut skipped = Vec::new();
    let (mut lm, mut ls, mut adds, mut used) = (0.0, 0.0, Vec::new(), 0usize);
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                lm += o.mask_loss;
                ls += o.seg_loss;
                adds.push(o.add);
                used += 1;
                state.warm[i] = Some(o.pose);
                state.apply(&o.grad, cfg);
            }
            Err(TrainError::Pnp(_)) => skipped.push(i),
            Err(e) => return Err(e),
        }
    }
    let mean = |x: f64| if used > 0 { x / used as f64 } else { 0.0 };
    let record = TrainRecord {
        epoch: state.epoch,
        mask_loss: mean(lm),
        seg_loss: mean(ls),
        mean_add: if adds.is_empty() { f64::NAN } else { 1e3 * adds.iter().sum::<f64>() / adds.len() as f64 },
        lr: state.lr,
        skipped,
    };

    if record.mask_loss < state.best_loss * (1.0 - cfg.plateau_threshold) {
        state.best_loss = record.mask_loss;
        state.stale_epochs = 0;
    } else {
        state.stale_epochs += 1;
        if state.stale_epochs >= cfg.plateau_patience {
            state.lr /= 10.0;
            state.stale_epochs = 0;
            // judge the new rate against where it started
            state.best_loss = record.mask_loss;
        }
    }
    state.epoch += 1;
    Ok(record)
}

/// Settings for fitting a pose directly to a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub steps: usize,
    /// Initial Levenberg-Marquardt damping, relative to the Hessian diagonal.
    pub damping: f64,
    pub render: RenderConfig,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self { steps: 200, damping: 1e-2, render: RenderConfig::default() }
    }
}

/// Minimizes `mask_loss(render(T), target)` over the camera-to-robot pose with
/// damped Gauss-Newton steps on the left tangent. Every step either lowers the
/// loss or is rejected with more damping. Returns the pose and the loss per step.
pub fn descend_pose(
    model: &RobotModel,
    q: &crate::kinematics::JointConfig,
    k: &crate::geometry::CameraIntrinsics,
    target: &MaskImage,
    init: &Pose,
    cfg: &DescentConfig,
    exec: Execution,
) -> Result<(Pose, Vec<f64>), TrainError> {
    let eval = |pose: &Pose| -> Result<(f64, SilhouetteImage, SoftRasterizer, Vec<Vec3>), TrainError> {
        let mesh = assemble_camera_mesh(model, q, pose)?.mesh;
        let raster = SoftRasterizer::new(&mesh, k, &cfg.render)?;
        let s = raster.forward(exec);
        let (loss, _) = mask_loss(&s, target)?;
        Ok((loss, s, raster, mesh.vertices))
    };
    let mut pose = *init;
    let (mut loss, mut s, mut raster, mut verts) = eval(&pose)?;
    let mut lambda = cfg.damping;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    history.push(loss);
    for _ in 0..cfg.steps {
        let vj: Vec<_> = verts.iter().map(point_pose_jacobian).collect();
        let jac = raster.pixel_jacobians(&vj, exec)?;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for ((j, sv), mv) in jac.iter().zip(&s.data).zip(&target.data) {
            h += j * j.transpose();
            g += j * (sv - mv);
        }
        if g.amax() == 0.0 {
            break;
        }
        loop {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let step = damped.cholesky().map(|c| -c.solve(&g));
            let Some(step) = step else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            };
            let cand = pose.retract(&Tangent::from_vector(&step));
            match eval(&cand) {
                Ok(next) if next.0 < loss => {
                    pose = cand;
                    (loss, s, raster, verts) = next;
                    lambda = (lambda / 10.0).max(1e-9);
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        break;
                    }
                }
            }
        }
        history.push(loss);
        if lambda > 1e12 {
            break;
        }
    }
    Ok((pose, history))
}

/// Supervised fitting of the bump model to keypoint labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 200,
            temperature: crate::perception::DEFAULT_TEMPERATURE,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    /// Mean squared keypoint error in heatmap pixels.
    pub loss: f64,
    pub lr: f64,
}

/// Least-squares fit of all bump parameters to `labels[scene][channel]`
/// (heatmap pixels) with full-batch Adam and plateau decay.
pub fn pretrain(
    params: &mut PerceptionParams,
    labels: &[Vec<Vec2>],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainRecord>, TrainError> {
    if !(cfg.lr > 0.0) {
        return Err(TrainError::InvalidConfig("lr must be positive".into()));
    }
    if labels.len() != params.n_scenes || labels.iter().any(|l| l.len() != params.n_keypoints) {
        return Err(TrainError::InvalidConfig("labels do not match the parameter layout".into()));
    }
    let adam_cfg = TrainConfig::default();
    let n_terms = (params.n_scenes * params.n_keypoints).max(1) as f64;
    let (mut m_kp, mut v_kp) = (vec![0.0; params.theta_kp.len()], vec![0.0; params.theta_kp.len()]);
    let (mut m_bb, mut v_bb) = (vec![0.0; params.theta_bb.len()], vec![0.0; params.theta_bb.len()]);
    let (mut lr, mut best, mut stale) = (cfg.lr, f64::INFINITY, 0);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let p = &*params;
        let per_scene = cfg.execution.map_indices(p.n_scenes, |s| -> Result<(f64, SceneGrad), TrainError> {
            let kp = predict_keypoints(p, s, cfg.temperature)?;
            let diff: Vec<Vec2> = kp.iter().zip(&labels[s]).map(|(a, b)| a - b).collect();
            let loss = diff.iter().map(|d| d.norm_squared()).sum::<f64>() / n_terms;
            let cot: Vec<Vec2> = diff.iter().map(|d| d * (2.0 / n_terms)).collect();
            Ok((loss, keypoints_vjp(p, s, cfg.temperature, &cot)?))
        });
        let mut loss = 0.0;
        let mut g_kp = vec![0.0; params.theta_kp.len()];
        let mut g_bb = vec![0.0; params.theta_bb.len()];
        let len = 3 * params.n_keypoints;
        for r in per_scene {
            let (l, g) = r?;
            loss += l;
            g_kp[g.scene * len..(g.scene + 1) * len].copy_from_slice(&g.kp);
            g_bb.iter_mut().zip(&g.bb).for_each(|(a, b)| *a += b);
        }
        let t = epoch as u32 + 1;
        adam_update(&mut params.theta_kp, &mut m_kp, &mut v_kp, &g_kp, t, lr, &adam_cfg);
        adam_update(&mut params.theta_bb, &mut m_bb, &mut v_bb, &g_bb, t, lr, &adam_cfg);
        records.push(PretrainRecord { epoch, loss, lr });
        if loss < best * (1.0 - cfg.plateau_threshold) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr /= 10.0;
                stale = 0;
                best = loss;
            }
        }
    }
    Ok(records)
}

/// How initial bump centers deviate from the true keypoint projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Per-channel offset length shared by all scenes (pixels), random direction.
    pub gap_px: f64,
    /// Additional independent per-scene offset, uniform in a disk of this radius (pixels).
    pub jitter_px: f64,
    pub seed: u64,
}

/// Per-channel systematic offsets drawn from the perturbation seed.
pub fn channel_gaps(n: usize, p: &Perturbation) -> Vec<Vec2> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    (0..n)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            Vec2::new(a.cos(), a.sin()) * p.gap_px
        })
        .collect()
}

/// Bump parameters centered on perturbed ground-truth keypoints, expressed at
/// heatmap resolution `width x height`.
pub fn initial_params(scenes: &[SceneSample], p: &Perturbation, width: usize, height: usize) -> PerceptionParams {
    let centers: Vec<Vec<Vec2>> = scenes
        .iter()
        .map(|s| rescale_keypoints(&s.gt_keypoints2d, width as f64 / s.intrinsics.width as f64))
        .collect();
    let mut params = PerceptionParams::from_centers(&centers, 0.0, width, height);
    perturb_centers(&mut params, p);
    params
}

/// Shifts every per-scene bump center by the channel gap plus per-scene jitter.
pub fn perturb_centers(params: &mut PerceptionParams, p: &Perturbation) {
    let n = params.n_keypoints;
    let gaps = channel_gaps(n, p);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(1);
    for scene in 0..params.n_scenes {
        let block = params.kp_block_mut(scene);
        for (j, g) in gaps.iter().enumerate() {
            let r = p.jitter_px * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            block[3 * j] += g.x + a.cos() * r;
            block[3 * j + 1] += g.y + a.sin() * r;
        }
    }
}
