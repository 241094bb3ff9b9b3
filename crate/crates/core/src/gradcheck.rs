//! Finite-difference checks of every differentiable stage.
//!
//! Each stage builds a seeded random instance, evaluates its analytic
//! gradient and compares it with central differences of the same scalar.

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{fd_check, fd_gradient, rel_err_inf, DEFAULT_STEP};
use crate::exec::Execution;
use crate::geometry::{project_point, project_with_jacobian, se3_exp, Pose, Tangent, Vec2, Vec3};
use crate::grid::ImageGrid;
use crate::kinematics::{assemble_camera_mesh, camera_points_pose_vjp, fk_frames, frame_jacobian, keypoints_3d, JointConfig};
use crate::metrics::{add_metric, add_metric_gradient};
use crate::perception::{
    keypoints_vjp, predict_keypoints, spatial_softmax, spatial_softmax_vjp, HeatmapStack, MaskMode, MaskProvider,
    PerceptionParams,
};
use crate::pnp::{pnp_backward, pnp_solve, Correspondences};
use crate::reference::{reference_arm, reference_intrinsics};
use crate::selftrain::{mask_loss, scene_step, seg_loss, TrainConfig, TrainData};
use crate::softrender::{hard_rasterize, render_silhouette, RenderConfig, SoftRasterizer};
use crate::synthgen::{sample_scene, Ranges};

pub const STAGES: [&str; 10] = [
    "se3_action",
    "projection",
    "kinematics",
    "spatial_softmax",
    "heatmap_model",
    "renderer",
    "pnp_implicit",
    "seg_loss",
    "add_metric",
    "pipeline",
];

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("stage {stage} failed to evaluate: {message}")]
    Evaluation { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn report(stage: &str, err: f64, tolerance: f64) -> StageReport {
    StageReport { stage: stage.into(), max_rel_err: err, tolerance, pass: err.is_finite() && err < tolerance }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

fn rand_vec3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(unit(rng), unit(rng), unit(rng)) * s
}

/// Runs one stage.
pub fn run_stage(stage: &str, seed: u64) -> Result<StageReport, GradcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = |e: &dyn std::fmt::Display| GradcheckError::Evaluation { stage: stage.into(), message: e.to_string() };
    let h = DEFAULT_STEP;
    match stage {
        "se3_action" => {
            let pose = se3_exp(&Tangent::new(rand_vec3(&mut rng, 1.0), rand_vec3(&mut rng, 1.0)));
            let pts: Vec<Vec3> = (0..5).map(|_| rand_vec3(&mut rng, 1.0)).collect();
            let cot: Vec<Vec3> = (0..5).map(|_| rand_vec3(&mut rng, 1.0)).collect();
            let f = |xi: &[f64]| {
                let p = pose.retract(&Tangent::from_vector(&Vector6::from_column_slice(xi)));
                pts.iter().zip(&cot).map(|(x, g)| g.dot(&p.transform_point(x))).sum::<f64>()
            };
            let cam: Vec<Vec3> = pts.iter().map(|x| pose.transform_point(x)).collect();
            let an = camera_points_pose_vjp(&cam, &cot);
            let err = fd_check(f, &[0.0; 6], an.as_slice(), h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "projection" => {
            let k = reference_intrinsics();
            let p = Vec3::new(unit(&mut rng) * 0.3, unit(&mut rng) * 0.3, 1.0 + rng.random::<f64>());
            let c = Vec2::new(unit(&mut rng), unit(&mut rng));
            let (_, j) = project_with_jacobian(&p, &k).map_err(|e| fail(&e))?;
            let an = j.transpose() * c;
            let f = |x: &[f64]| project_point(&Vec3::new(x[0], x[1], x[2]), &k).map_or(f64::NAN, |uv| uv.dot(&c));
            let err = fd_check(f, p.as_slice(), an.as_slice(), h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "kinematics" => {
            let arm = reference_arm();
            let q = JointConfig(arm.limits().iter().map(|(lo, hi)| rng.random_range(lo * 0.8..hi * 0.8)).collect());
            let c = rand_vec3(&mut rng, 1.0);
            let ee = arm.end_effector_frame();
            let (_, j) = frame_jacobian(&arm, &q, ee).map_err(|e| fail(&e))?;
            let an: Vec<f64> = (0..arm.dof()).map(|i| j.fixed_view::<3, 1>(3, i).dot(&c)).collect();
            let f = |x: &[f64]| fk_frames(&arm, &JointConfig(x.to_vec())).map_or(f64::NAN, |fr| fr[ee].translation.dot(&c));
            let err = fd_check(f, &q.0, &an, h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "spatial_softmax" => {
            let mut hm = HeatmapStack::zeros(2, 8, 6);
            hm.data.iter_mut().for_each(|v| *v = 2.0 * unit(&mut rng));
            let g = vec![Vec2::new(unit(&mut rng), unit(&mut rng)), Vec2::new(unit(&mut rng), unit(&mut rng))];
            let tau = 0.7;
            let an = spatial_softmax_vjp(&hm, tau, &g).map_err(|e| fail(&e))?;
            let f = |x: &[f64]| {
                let s = HeatmapStack { data: x.to_vec(), ..hm.clone() };
                spatial_softmax(&s, tau).map_or(f64::NAN, |kp| kp.iter().zip(&g).map(|(a, b)| a.dot(b)).sum())
            };
            let err = fd_check(f, &hm.data, &an.data, h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "heatmap_model" => {
            let centers = vec![(0..3).map(|_| Vec2::new(rng.random_range(4.0..12.0), rng.random_range(4.0..12.0))).collect()];
            let mut params = PerceptionParams::from_centers(&centers, 0.0, 16, 16);
            for j in 0..3 {
                params.theta_kp[3 * j + 2] = 0.3 * unit(&mut rng);
                params.theta_bb[2 * j] = unit(&mut rng);
                params.theta_bb[2 * j + 1] = unit(&mut rng);
            }
            let g: Vec<Vec2> = (0..3).map(|_| Vec2::new(unit(&mut rng), unit(&mut rng))).collect();
            let grad = keypoints_vjp(&params, 0, 1.0, &g).map_err(|e| fail(&e))?;
            let an: Vec<f64> = grad.kp.iter().chain(&grad.bb).copied().collect();
            let x0: Vec<f64> = params.theta_kp.iter().chain(&params.theta_bb).copied().collect();
            let nk = params.theta_kp.len();
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.theta_kp.copy_from_slice(&x[..nk]);
                p.theta_bb.copy_from_slice(&x[nk..]);
                predict_keypoints(&p, 0, 1.0).map_or(f64::NAN, |kp| kp.iter().zip(&g).map(|(a, b)| a.dot(b)).sum())
            };
            let err = fd_check(f, &x0, &an, h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "renderer" => {
            let arm = reference_arm();
            let k = reference_intrinsics();
            let scene = sample_scene(&arm, &k, rng.random(), &Ranges::default()).map_err(|e| fail(&e))?;
            let cfg = RenderConfig { sigma: 1e-4, ..Default::default() };
            let target = render_silhouette(&assemble_camera_mesh(&arm, &scene.q, &scene.gt_pose).map_err(|e| fail(&e))?.mesh, &k, &cfg)
                .map_err(|e| fail(&e))?;
            let start = scene.gt_pose.retract(&Tangent::new(rand_vec3(&mut rng, 0.02), rand_vec3(&mut rng, 0.02)));
            let loss_grad = |pose: &Pose| -> Option<(f64, Vector6<f64>)> {
                let mesh = assemble_camera_mesh(&arm, &scene.q, pose).ok()?.mesh;
                let r = SoftRasterizer::new(&mesh, &k, &cfg).ok()?;
                let (l, cot) = mask_loss(&r.forward(Execution::Sequential), &target).ok()?;
                let vg = r.backward_vertices(&cot, Execution::Sequential).ok()?;
                Some((l, camera_points_pose_vjp(&mesh.vertices, &vg)))
            };
            let (_, an) = loss_grad(&start).ok_or_else(|| fail(&"render failed"))?;
            let f = |xi: &[f64]| {
                loss_grad(&start.retract(&Tangent::from_vector(&Vector6::from_column_slice(xi)))).map_or(f64::NAN, |v| v.0)
            };
            let fd = fd_gradient(f, &[0.0; 6], 1e-4).map_err(|e| fail(&e))?;
            Ok(report(stage, rel_err_inf(&fd, an.as_slice()), 2e-2))
        }
        "pnp_implicit" => {
            let k = reference_intrinsics();
            let arm = reference_arm();
            let scene = sample_scene(&arm, &k, rng.random(), &Ranges::default()).map_err(|e| fail(&e))?;
            let pts = keypoints_3d(&arm, &scene.q).map_err(|e| fail(&e))?;
            let c = Correspondences::new(scene.gt_keypoints2d.clone(), pts.clone()).map_err(|e| fail(&e))?;
            let sol = pnp_solve(&c, &k, None).map_err(|e| fail(&e))?;
            let reference = scene.gt_pose.retract(&Tangent::new(rand_vec3(&mut rng, 0.02), rand_vec3(&mut rng, 0.03)));
            let cot = add_metric_gradient(&sol.pose, &reference, &pts).map_err(|e| fail(&e))?;
            let an = pnp_backward(&c, &k, &sol, &cot).map_err(|e| fail(&e))?;
            let x0: Vec<f64> = c.points2d.iter().flat_map(|p| [p.x, p.y]).collect();
            let f = |x: &[f64]| {
                let mut cp = c.clone();
                cp.points2d = x.chunks(2).map(|v| Vec2::new(v[0], v[1])).collect();
                pnp_solve(&cp, &k, Some(&sol.pose)).ok().and_then(|s| add_metric(&s.pose, &reference, &pts).ok()).unwrap_or(f64::NAN)
            };
            let fd = fd_gradient(f, &x0, 1e-4).map_err(|e| fail(&e))?;
            Ok(report(stage, rel_err_inf(&fd, &an), 1e-3))
        }
        "seg_loss" => {
            let s = ImageGrid::from_fn(6, 5, |_, _| rng.random_range(0.05..0.95));
            let m = ImageGrid::from_fn(6, 5, |_, _| rng.random_range(0.0..1.0));
            let w = rng.random_range(0.1..1.0);
            let (_, an) = seg_loss(&s, &m, w).map_err(|e| fail(&e))?;
            let f = |x: &[f64]| seg_loss(&s, &ImageGrid { data: x.to_vec(), ..m.clone() }, w).map_or(f64::NAN, |v| v.0);
            let err = fd_check(f, &m.data, &an.data, h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "add_metric" => {
            let est = se3_exp(&Tangent::new(rand_vec3(&mut rng, 1.0), rand_vec3(&mut rng, 1.0)));
            let gt = est.retract(&Tangent::new(rand_vec3(&mut rng, 0.1), rand_vec3(&mut rng, 0.1)));
            let pts: Vec<Vec3> = (0..7).map(|_| rand_vec3(&mut rng, 0.5)).collect();
            let an = add_metric_gradient(&est, &gt, &pts).map_err(|e| fail(&e))?;
            let f = |xi: &[f64]| {
                add_metric(&est.retract(&Tangent::from_vector(&Vector6::from_column_slice(xi))), &gt, &pts).unwrap_or(f64::NAN)
            };
            let err = fd_check(f, &[0.0; 6], an.as_slice(), h).map_err(|e| fail(&e))?;
            Ok(report(stage, err, 1e-6))
        }
        "pipeline" => pipeline_stage(&mut rng).map_err(|m| GradcheckError::Evaluation { stage: stage.into(), message: m }),
        other => Err(GradcheckError::UnknownStage(other.into())),
    }
}

/// Mask loss of one training scene as a function of its bump parameters,
/// through spatial softmax, PnP and the renderer.
fn pipeline_stage(rng: &mut ChaCha8Rng) -> Result<StageReport, String> {
    let arm = reference_arm();
    let k = reference_intrinsics();
    let scene = sample_scene(&arm, &k, rng.random(), &Ranges::default()).map_err(|e| e.to_string())?;
    let oracle = hard_rasterize(&assemble_camera_mesh(&arm, &scene.q, &scene.gt_pose).map_err(|e| e.to_string())?.mesh, &k);
    // Keypoints consistent with a nearby pose keep the PnP residual at zero,
    // where the Gauss-Newton Hessian used by the backward pass is exact.
    let off = scene.gt_pose.retract(&Tangent::new(rand_vec3(rng, 0.01), rand_vec3(rng, 0.02)));
    let pts = keypoints_3d(&arm, &scene.q).map_err(|e| e.to_string())?;
    let projected: Result<Vec<Vec2>, _> = pts.iter().map(|p| project_point(&off.transform_point(p), &k)).collect();
    let centers = vec![projected.map_err(|e| e.to_string())?];
    let params = PerceptionParams::from_centers(&centers, 0.0, k.width, k.height);
    let masks = MaskProvider::new(vec![oracle], Default::default());
    let scenes = [scene];
    let data = TrainData { model: &arm, scenes: &scenes, masks: &masks };
    let cfg = TrainConfig {
        mask_mode: MaskMode::Oracle,
        grad_clip: f64::INFINITY,
        render: RenderConfig { sigma: 1e-4, ..Default::default() },
        execution: Execution::Sequential,
        ..Default::default()
    };
    let out = scene_step(&params, &data, 0, None, &cfg).map_err(|e| e.to_string())?;
    let an: Vec<f64> = out.grad.kp.iter().chain(&out.grad.bb).copied().collect();
    let nk = params.theta_kp.len();
    let x0: Vec<f64> = params.theta_kp.iter().chain(&params.theta_bb).copied().collect();
    let f = |x: &[f64]| {
        let mut p = params.clone();
        p.theta_kp.copy_from_slice(&x[..nk]);
        p.theta_bb.copy_from_slice(&x[nk..]);
        scene_step(&p, &data, 0, Some(&out.pose), &cfg).map_or(f64::NAN, |o| o.mask_loss)
    };
    let fd = fd_gradient(f, &x0, 1e-4).map_err(|e| e.to_string())?;
    Ok(report("pipeline", rel_err_inf(&fd, &an), 1e-2))
}

/// Runs every stage in [`STAGES`] order.
pub fn run_all(seed: u64) -> Result<Vec<StageReport>, GradcheckError> {
    STAGES.iter().map(|s| run_stage(s, seed)).collect()
}
