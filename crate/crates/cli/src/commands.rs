use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ctrpose::exec::Execution;
use ctrpose::gradcheck;
use ctrpose::kinematics::{keypoints_3d, RobotModel};
use ctrpose::metrics::{add_metric, MetricReport};
use ctrpose::pbvs::{
    run_servo, sample_trial, BiasedEstimator, CameraMotion, CtrnetEstimator, GroundTruthEstimator,
    PoseEstimator, ServoConfig,
};
use ctrpose::perception::{predict_keypoints, rescale_keypoints, Corruption, MaskMode, MaskProvider, PerceptionParams};
use ctrpose::pnp::{pnp_solve, Correspondences};
use ctrpose::reference::{
    planar_goal_ranges, planar_scene_ranges, planar_two_link, reference_arm, reference_goal_ranges, reference_intrinsics,
};
use ctrpose::selftrain::{
    channel_gaps, initial_params, perturb_centers, pretrain as fit_labels, train_epoch, Perturbation, PretrainConfig, TrainConfig,
    TrainData, TrainState,
};
use ctrpose::softrender::RenderConfig;
use ctrpose::synthgen::{generate_scenes, read_dataset, write_dataset, Dataset, Ranges};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, resolve, Overrides};
use crate::{CliError, EvalArgs, GenArgs, GradcheckArgs, PretrainArgs, ServoArgs, TrainArgs};

pub enum Status {
    Success(PathBuf),
    /// The run completed but reported failing checks.
    ChecksFailed(PathBuf),
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative to the output directory, sorted.
    pub artifact_paths: Vec<String>,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Picks and creates the output directory. Existing non-empty directories are refused.
fn claim_out(out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(p) => p.to_owned(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            let base = PathBuf::from("runs").join(format!("{command}-{secs}"));
            let mut dir = base.clone();
            let mut i = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{i}", base.display()));
                i += 1;
            }
            dir
        }
    };
    if dir.exists() {
        let empty = fs::read_dir(&dir).map_err(|e| usage(format!("--out {}: {e}", dir.display())))?.next().is_none();
        if !empty {
            return Err(usage(format!("--out {} already exists and is not empty", dir.display())));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn collect_files(root: &Path, dir: &Path, into: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, into)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            into.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Writes the resolved config and the manifest listing every file in `out`.
fn finish<C: Serialize>(out: &Path, command: &str, cfg: &C, seed: u64) -> Result<(), CliError> {
    write_json(&out.join("config.json"), cfg)?;
    let mut artifact_paths = Vec::new();
    collect_files(out, out, &mut artifact_paths).map_err(runtime)?;
    artifact_paths.retain(|p| p != "run_manifest.json");
    artifact_paths.sort();
    let manifest = RunManifest { command: command.into(), config_hash: config_hash(cfg), seed, artifact_paths };
    write_json(&out.join("run_manifest.json"), &manifest)
}

/// A robot by file path or built-in name, with its default scene and goal ranges.
struct Robot {
    model: RobotModel,
    ranges: Ranges,
    goal_ranges: Vec<(f64, f64)>,
}

fn load_robot(spec: &str) -> Result<Robot, CliError> {
    match spec {
        "builtin:arm3" => Ok(Robot { model: reference_arm(), ranges: Ranges::default(), goal_ranges: reference_goal_ranges() }),
        "builtin:planar2" => {
            Ok(Robot { model: planar_two_link(), ranges: planar_scene_ranges(), goal_ranges: planar_goal_ranges() })
        }
        other if other.starts_with("builtin:") => Err(usage(format!("--robot: unknown built-in `{other}`"))),
        path => {
            let model = RobotModel::load(Path::new(path)).map_err(|e| usage(format!("--robot: {e}")))?;
            let goal_ranges = model.limits();
            Ok(Robot { model, ranges: Ranges::default(), goal_ranges })
        }
    }
}

fn load_dataset(dir: &Option<PathBuf>) -> Result<Dataset, CliError> {
    let dir = dir.as_ref().ok_or_else(|| usage("--data is required"))?;
    let ds = read_dataset(dir).map_err(|e| usage(format!("--data {}: {e}", dir.display())))?;
    if ds.scenes.is_empty() {
        return Err(usage(format!("--data {}: no scenes", dir.display())));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path, ds: Option<&Dataset>) -> Result<PerceptionParams, CliError> {
    let params = PerceptionParams::load(path).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))?;
    if let Some(ds) = ds {
        let k = &ds.manifest.intrinsics;
        if params.n_scenes != ds.scenes.len()
            || params.n_keypoints != ds.model.n_keypoints()
            || (params.width, params.height) != (k.width, k.height)
        {
            return Err(usage(format!("checkpoint {} does not match the dataset", path.display())));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub robot: String,
    pub n: usize,
    pub seed: u64,
    pub masks: bool,
    /// `None` uses the robot's default ranges.
    pub ranges: Option<Ranges>,
    pub render: RenderConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { robot: "builtin:arm3".into(), n: 20, seed: 0, masks: false, ranges: None, render: RenderConfig::default() }
    }
}

pub fn gen(a: GenArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mut o = Overrides::new();
    o.set("robot", a.robot).set("n", a.n).set("seed", a.seed).set("masks", a.masks.then_some(true));
    let cfg: GenConfig = resolve(file, o)?;
    if cfg.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let robot = load_robot(&cfg.robot)?;
    let ranges = cfg.ranges.clone().unwrap_or(robot.ranges);
    ranges.validate(&robot.model).map_err(usage)?;
    cfg.render.validate().map_err(usage)?;

    let out = claim_out(out, "gen")?;
    let k = reference_intrinsics();
    let scenes = generate_scenes(&robot.model, &k, cfg.seed, cfg.n, &ranges, Execution::default()).map_err(runtime)?;
    write_dataset(&out, &robot.model, &scenes, &ranges, &cfg.render, cfg.seed, cfg.masks).map_err(runtime)?;
    finish(&out, "gen", &cfg, cfg.seed)?;
    Ok(Status::Success(out))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// Scenes where PnP found no pose; excluded from the metrics.
    pub failed_scenes: Vec<usize>,
}

/// Keypoints by spatial softmax, poses by PnP, metrics against ground truth.
pub fn evaluate(
    ds: &Dataset,
    params: &PerceptionParams,
    temperature: f64,
    pck_threshold: f64,
) -> Result<EvalReport, CliError> {
    let mut adds = Vec::new();
    let mut errors2d = Vec::new();
    let mut failed_scenes = Vec::new();
    for (i, s) in ds.scenes.iter().enumerate() {
        let heat = predict_keypoints(params, i, temperature).map_err(runtime)?;
        let kp = rescale_keypoints(&heat, s.intrinsics.width as f64 / params.width as f64);
        errors2d.extend(kp.iter().zip(&s.gt_keypoints2d).map(|(a, b)| (a - b).norm()));
        let points = keypoints_3d(&ds.model, &s.q).map_err(runtime)?;
        let solved = Correspondences::new(kp, points.clone()).and_then(|c| pnp_solve(&c, &s.intrinsics, None));
        match solved {
            Ok(sol) => adds.push(add_metric(&sol.pose, &s.gt_pose, &points).map_err(runtime)?),
            Err(_) => failed_scenes.push(i),
        }
    }
    if adds.is_empty() {
        return Err(runtime("PnP failed on every scene"));
    }
    Ok(EvalReport { metrics: MetricReport::new(adds, &errors2d, pck_threshold).map_err(runtime)?, failed_scenes })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCmdConfig {
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub pck_threshold: f64,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainCmdConfig {
    fn default() -> Self {
        Self { data: None, seed: 0, pck_threshold: 5.0, pretrain: PretrainConfig::default() }
    }
}

pub fn pretrain(a: PretrainArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mut o = Overrides::new();
    o.set("data", a.data).set("seed", a.seed).set("pretrain.epochs", a.epochs).set("pretrain.lr", a.lr);
    let cfg: PretrainCmdConfig = resolve(file, o)?;
    if !(cfg.pretrain.lr > 0.0) || !(cfg.pretrain.temperature > 0.0) {
        return Err(usage("pretrain lr and temperature must be positive"));
    }
    let ds = load_dataset(&cfg.data)?;

    let out = claim_out(out, "pretrain")?;
    let k = ds.manifest.intrinsics;
    let center = ctrpose::geometry::Vec2::new((k.width as f64 - 1.0) / 2.0, (k.height as f64 - 1.0) / 2.0);
    let n = ds.model.n_keypoints();
    let starts = vec![vec![center; n]; ds.scenes.len()];
    let mut params = PerceptionParams::from_centers(&starts, 0.0, k.width, k.height);
    let labels: Vec<_> = ds.scenes.iter().map(|s| s.gt_keypoints2d.clone()).collect();
    let log = fit_labels(&mut params, &labels, &cfg.pretrain).map_err(runtime)?;
    params.save(&out.join("checkpoint.json")).map_err(runtime)?;
    write_json(&out.join("pretrain_log.json"), &log)?;
    write_json(&out.join("metrics.json"), &evaluate(&ds, &params, cfg.pretrain.temperature, cfg.pck_threshold)?)?;
    finish(&out, "pretrain", &cfg, cfg.seed)?;
    Ok(Status::Success(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub gap_px: f64,
    pub jitter_px: f64,
    /// Drives the perturbation, the mask corruption and `train.seed`.
    pub seed: u64,
    pub radius: usize,
    pub flip_rate: f64,
    pub pck_threshold: f64,
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            data: None,
            init: None,
            gap_px: 4.0,
            jitter_px: 0.0,
            seed: 0,
            radius: 1,
            flip_rate: 0.01,
            pck_threshold: 5.0,
            train: TrainConfig::default(),
        }
    }
}

pub fn train(a: TrainArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mode = a.mask_mode.as_deref().map(str::parse::<MaskMode>).transpose().map_err(|e| usage(format!("--mask-mode: {e}")))?;
    let mut o = Overrides::new();
    o.set("data", a.data)
        .set("init", a.init)
        .set("gap_px", a.gap_px)
        .set("jitter_px", a.jitter_px)
        .set("seed", a.seed)
        .set("radius", a.radius)
        .set("flip_rate", a.flip_rate)
        .set("train.mask_mode", mode)
        .set("train.scene_heads", a.shared_only.then_some(false))
        .set("train.epochs", a.epochs)
        .set("train.lr", a.lr);
    let mut cfg: TrainCmdConfig = resolve(file, o)?;
    cfg.train.seed = cfg.seed;
    cfg.train.validate().map_err(usage)?;
    if !(0.0..=1.0).contains(&cfg.flip_rate) || !(cfg.gap_px >= 0.0) || !(cfg.jitter_px >= 0.0) {
        return Err(usage("flip_rate must lie in [0, 1] and perturbation sizes must be non-negative"));
    }
    let ds = load_dataset(&cfg.data)?;
    let pert = Perturbation { gap_px: cfg.gap_px, jitter_px: cfg.jitter_px, seed: cfg.seed };
    let k = ds.manifest.intrinsics;
    let params = match &cfg.init {
        Some(p) => {
            let mut params = load_checkpoint(p, Some(&ds))?;
            perturb_centers(&mut params, &pert);
            params
        }
        None => initial_params(&ds.scenes, &pert, k.width, k.height),
    };

    let out = claim_out(out, "train")?;
    let oracle = ds.scenes.iter().map(|s| s.gt_mask.clone()).collect();
    let masks = MaskProvider::new(oracle, Corruption { radius: cfg.radius, flip_rate: cfg.flip_rate, seed: cfg.seed });
    let mut state = TrainState::new(params, &cfg.train);
    if cfg.train.mask_mode == MaskMode::Trainable {
        state.params.init_mask_logits(&masks.corrupted).map_err(runtime)?;
    }
    let data = TrainData { model: &ds.model, scenes: &ds.scenes, masks: &masks };
    let log = (0..cfg.train.epochs)
        .map(|_| train_epoch(&mut state, &data, &cfg.train))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    state.params.save(&out.join("checkpoint.json")).map_err(runtime)?;
    write_json(&out.join("train_log.json"), &log)?;
    write_json(&out.join("metrics.json"), &evaluate(&ds, &state.params, cfg.train.temperature, cfg.pck_threshold)?)?;
    finish(&out, "train", &cfg, cfg.seed)?;
    Ok(Status::Success(out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub temperature: f64,
    pub pck_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { data: None, ckpt: None, temperature: ctrpose::perception::DEFAULT_TEMPERATURE, pck_threshold: 5.0 }
    }
}

pub fn eval(a: EvalArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mut o = Overrides::new();
    o.set("data", a.data).set("ckpt", a.ckpt).set("pck_threshold", a.pck_threshold);
    let cfg: EvalConfig = resolve(file, o)?;
    if !(cfg.temperature > 0.0) || !(cfg.pck_threshold >= 0.0) {
        return Err(usage("temperature must be positive and pck_threshold non-negative"));
    }
    let ds = load_dataset(&cfg.data)?;
    let ckpt = cfg.ckpt.as_ref().ok_or_else(|| usage("--ckpt is required"))?;
    let params = load_checkpoint(ckpt, Some(&ds))?;

    let out = claim_out(out, "eval")?;
    write_json(&out.join("metrics.json"), &evaluate(&ds, &params, cfg.temperature, cfg.pck_threshold)?)?;
    finish(&out, "eval", &cfg, ds.manifest.master_seed)?;
    Ok(Status::Success(out))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub all: bool,
    pub stage: Option<String>,
    pub seed: u64,
}

pub fn gradcheck(a: GradcheckArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mut o = Overrides::new();
    o.set("all", a.all.then_some(true)).set("stage", a.stage).set("seed", a.seed);
    let cfg: GradcheckConfig = resolve(file, o)?;
    let stages: Vec<&str> = match (&cfg.stage, cfg.all) {
        (None, true) => gradcheck::STAGES.to_vec(),
        (Some(s), false) if gradcheck::STAGES.contains(&s.as_str()) => vec![s.as_str()],
        (Some(s), false) => {
            return Err(usage(format!("--stage: unknown `{s}`; expected one of {}", gradcheck::STAGES.join(", "))))
        }
        _ => return Err(usage("pass exactly one of --all or --stage")),
    };

    let out = claim_out(out, "gradcheck")?;
    let reports =
        stages.iter().map(|s| gradcheck::run_stage(s, cfg.seed)).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
    write_json(&out.join("gradcheck.json"), &reports)?;
    finish(&out, "gradcheck", &cfg, cfg.seed)?;
    Ok(if reports.iter().all(|r| r.pass) { Status::Success(out) } else { Status::ChecksFailed(out) })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoCmdConfig {
    pub robot: String,
    pub estimator: String,
    pub gain: f64,
    pub duration: f64,
    pub camera_motion: String,
    pub orbit_rate: f64,
    pub seed: u64,
    pub gap_px: f64,
    pub gap_seed: u64,
    pub temperature: f64,
    /// `None` uses the robot's defaults.
    pub ranges: Option<Ranges>,
    pub goal_ranges: Option<Vec<(f64, f64)>>,
    /// Goal keypoints stay this far inside the image (pixels).
    pub margin_px: f64,
}

impl Default for ServoCmdConfig {
    fn default() -> Self {
        let s = ServoConfig::default();
        Self {
            robot: "builtin:arm3".into(),
            estimator: "gt".into(),
            gain: s.gain,
            duration: 5.0,
            camera_motion: "static".into(),
            orbit_rate: CameraMotion::DEFAULT_ORBIT_RATE,
            seed: 0,
            gap_px: 4.0,
            gap_seed: 0,
            temperature: ctrpose::perception::DEFAULT_TEMPERATURE,
            ranges: None,
            goal_ranges: None,
            margin_px: 2.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ServoSummary {
    final_translational_err: f64,
    final_rotational_err: f64,
    faults: usize,
    first_fault: Option<String>,
    steps: usize,
}

enum EstimatorSpec {
    Truth,
    Biased(f64),
    Ctrnet(PathBuf),
}

fn parse_estimator(s: &str) -> Result<EstimatorSpec, CliError> {
    match s.split_once(':') {
        None if s == "gt" => Ok(EstimatorSpec::Truth),
        Some(("biased", m)) => m
            .parse::<f64>()
            .ok()
            .filter(|m| m.is_finite())
            .map(EstimatorSpec::Biased)
            .ok_or_else(|| usage(format!("--estimator: bad bias `{m}`"))),
        Some(("ctrnet", p)) if !p.is_empty() => Ok(EstimatorSpec::Ctrnet(PathBuf::from(p))),
        _ => Err(usage(format!("--estimator: expected gt, biased:<meters> or ctrnet:<checkpoint>, got `{s}`"))),
    }
}

pub fn servo(a: ServoArgs, file: Option<&Path>, out: Option<&Path>) -> Result<Status, CliError> {
    let mut o = Overrides::new();
    o.set("robot", a.robot)
        .set("estimator", a.estimator)
        .set("gain", a.gain)
        .set("duration", a.duration)
        .set("camera_motion", a.camera_motion)
        .set("orbit_rate", a.orbit_rate)
        .set("seed", a.seed)
        .set("gap_px", a.gap_px)
        .set("gap_seed", a.gap_seed);
    let cfg: ServoCmdConfig = resolve(file, o)?;
    let camera_motion = match cfg.camera_motion.as_str() {
        "static" => CameraMotion::Static,
        "orbit" => CameraMotion::Orbit { rate: cfg.orbit_rate },
        other => return Err(usage(format!("--camera-motion: expected static or orbit, got `{other}`"))),
    };
    let servo_cfg = ServoConfig { gain: cfg.gain, camera_motion, ..ServoConfig::default() };
    servo_cfg.validate().map_err(usage)?;
    if !(cfg.duration > 0.0 && cfg.duration.is_finite()) {
        return Err(usage("--duration must be positive"));
    }
    let robot = load_robot(&cfg.robot)?;
    let ranges = cfg.ranges.clone().unwrap_or(robot.ranges);
    ranges.validate(&robot.model).map_err(usage)?;
    let goal_ranges = cfg.goal_ranges.clone().unwrap_or(robot.goal_ranges);
    let k = reference_intrinsics();
    let mut estimator: Box<dyn PoseEstimator> = match parse_estimator(&cfg.estimator)? {
        EstimatorSpec::Truth => Box::new(GroundTruthEstimator),
        EstimatorSpec::Biased(m) => Box::new(BiasedEstimator::new(m)),
        EstimatorSpec::Ctrnet(path) => {
            let params = load_checkpoint(&path, None)?;
            if params.n_keypoints != robot.model.n_keypoints() {
                return Err(usage(format!("checkpoint {} does not match the robot", path.display())));
            }
            let gap = channel_gaps(
                params.n_keypoints,
                &Perturbation { gap_px: cfg.gap_px, jitter_px: 0.0, seed: cfg.gap_seed },
            );
            Box::new(CtrnetEstimator::from_params(&params, k, gap, cfg.temperature).map_err(usage)?)
        }
    };

    let out = claim_out(out, "servo")?;
    let initial = sample_trial(&robot.model, &k, cfg.seed, &ranges, &goal_ranges, cfg.margin_px).map_err(runtime)?;
    let trace = run_servo(&robot.model, &initial, estimator.as_mut(), &servo_cfg, cfg.duration).map_err(runtime)?;
    trace.write_csv(&out.join("trace.csv")).map_err(runtime)?;
    trace.save_plot(&out.join("trace.png")).map_err(runtime)?;
    let last = trace.samples.last().expect("trace has the initial sample");
    let summary = ServoSummary {
        final_translational_err: last.translational_err,
        final_rotational_err: last.rotational_err,
        faults: trace.faults(),
        first_fault: trace.samples.iter().find_map(|s| s.fault.clone()),
        steps: trace.samples.len() - 1,
    };
    write_json(&out.join("summary.json"), &summary)?;
    finish(&out, "servo", &cfg, cfg.seed)?;
    Ok(Status::Success(out))
}
