//! Keypoint heatmaps and foreground masks.
//!
//! The keypoint head is a per-scene parametric model: channel `j` of scene
//! `s` is the logit field
//!
//! ```text
//! h(x) = -exp(a_sj) * |x - (c_sj + b_j)|^2 / 2
//! ```
//!
//! with a per-scene center `c_sj`, log-sharpness `a_sj` and an offset `b_j`
//! shared by all scenes. Keypoints are read out with a spatial softmax.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::grid::ImageGrid;

pub type MaskImage = ImageGrid;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
/// Logit magnitude used to initialize trainable masks from binary ones.
pub const MASK_LOGIT: f64 = 16.0;
const BLOCK: usize = 8;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("unknown scene {0} (have {1})")]
    UnknownScene(usize, usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask mode `trainable` requires mask logits")]
    NoMaskLogits,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// `n` channels of `height x width` logits, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl HeatmapStack {
    pub fn zeros(n: usize, width: usize, height: usize) -> Self {
        Self { n, width, height, data: vec![0.0; n * width * height] }
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let len = self.width * self.height;
        &self.data[j * len..(j + 1) * len]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.width * self.height;
        &mut self.data[j * len..(j + 1) * len]
    }
}

fn check_temperature(t: f64) -> Result<(), PerceptionError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PerceptionError::InvalidTemperature(t))
    }
}

/// Softmax of `logits / temperature` over one channel.
fn channel_probabilities(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|h| ((h - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

fn expectation(p: &[f64], width: usize) -> Vec2 {
    let mut o = Vec2::zeros();
    for (i, pi) in p.iter().enumerate() {
        o += Vec2::new((i % width) as f64, (i / width) as f64) * *pi;
    }
    o
}

/// Expected pixel coordinate `(u, v)` of each channel under `softmax(h / temperature)`.
pub fn spatial_softmax(h: &HeatmapStack, temperature: f64) -> Result<Vec<Vec2>, PerceptionError> {
    check_temperature(temperature)?;
    Ok((0..h.n).map(|j| expectation(&channel_probabilities(h.channel(j), temperature), h.width)).collect())
}

/// Heatmap cotangent for keypoint cotangents `g`:
/// `dL/dh_k = p_k ((x_k - o) . g) / temperature`.
pub fn spatial_softmax_vjp(h: &HeatmapStack, temperature: f64, g: &[Vec2]) -> Result<HeatmapStack, PerceptionError> {
    check_temperature(temperature)?;
    if g.len() != h.n {
        return Err(PerceptionError::ShapeMismatch(format!("{} cotangents for {} channels", g.len(), h.n)));
    }
    let mut out = HeatmapStack::zeros(h.n, h.width, h.height);
    for (j, gj) in g.iter().enumerate() {
        let p = channel_probabilities(h.channel(j), temperature);
        let o = expectation(&p, h.width);
        for (i, (dst, pi)) in out.channel_mut(j).iter_mut().zip(&p).enumerate() {
            let x = Vec2::new((i % h.width) as f64, (i / h.width) as f64);
            *dst = pi * (x - o).dot(gj) / temperature;
        }
    }
    Ok(out)
}

/// Maps keypoints between resolutions that share the same field of view.
pub fn rescale_keypoints(kp: &[Vec2], factor: f64) -> Vec<Vec2> {
    kp.iter().map(|p| (p + Vec2::new(0.5, 0.5)) * factor - Vec2::new(0.5, 0.5)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionParams {
    pub n_keypoints: usize,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    /// `[u, v, log_sharpness]` per scene and channel.
    pub theta_kp: Vec<f64>,
    /// Mask logits per scene, `height * width` each; empty if masks are not trainable.
    pub theta_seg: Vec<f64>,
    /// Center offsets `[du, dv]` per channel, shared by all scenes.
    pub theta_bb: Vec<f64>,
}

/// Gradient for one scene's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub scene: usize,
    pub kp: Vec<f64>,
    pub bb: Vec<f64>,
    pub seg: Vec<f64>,
}

impl SceneGrad {
    pub fn zeros(params: &PerceptionParams, scene: usize) -> Self {
        let seg = if params.theta_seg.is_empty() { 0 } else { params.width * params.height };
        Self { scene, kp: vec![0.0; 3 * params.n_keypoints], bb: vec![0.0; 2 * params.n_keypoints], seg: vec![0.0; seg] }
    }

    pub fn norm_squared(&self) -> f64 {
        self.kp.iter().chain(&self.bb).chain(&self.seg).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, f: f64) {
        for v in self.kp.iter_mut().chain(self.bb.iter_mut()).chain(self.seg.iter_mut()) {
            *v *= f;
        }
    }
}

impl PerceptionParams {
    /// Bumps centered at `centers[scene][channel]` with the given log-sharpness.
    pub fn from_centers(centers: &[Vec<Vec2>], log_sharpness: f64, width: usize, height: usize) -> Self {
        let n = centers.first().map_or(0, |c| c.len());
        let mut theta_kp = Vec::with_capacity(centers.len() * n * 3);
        for scene in centers {
            assert_eq!(scene.len(), n, "every scene needs the same number of keypoints");
            for c in scene {
                theta_kp.extend([c.x, c.y, log_sharpness]);
            }
        }
        Self {
            n_keypoints: n,
            n_scenes: centers.len(),
            width,
            height,
            theta_kp,
            theta_seg: Vec::new(),
            theta_bb: vec![0.0; 2 * n],
        }
    }

    fn check_scene(&self, scene: usize) -> Result<(), PerceptionError> {
        if scene >= self.n_scenes {
            return Err(PerceptionError::UnknownScene(scene, self.n_scenes));
        }
        Ok(())
    }

    pub fn kp_block(&self, scene: usize) -> &[f64] {
        let len = 3 * self.n_keypoints;
        &self.theta_kp[scene * len..(scene + 1) * len]
    }

    pub fn kp_block_mut(&mut self, scene: usize) -> &mut [f64] {
        let len = 3 * self.n_keypoints;
        &mut self.theta_kp[scene * len..(scene + 1) * len]
    }

    pub fn seg_block(&self, scene: usize) -> &[f64] {
        let len = self.width * self.height;
        &self.theta_seg[scene * len..(scene + 1) * len]
    }

    pub fn seg_block_mut(&mut self, scene: usize) -> &mut [f64] {
        let len = self.width * self.height;
        &mut self.theta_seg[scene * len..(scene + 1) * len]
    }

    /// Effective bump centers of a scene (per-scene center plus shared offset).
    pub fn centers(&self, scene: usize) -> Result<Vec<Vec2>, PerceptionError> {
        self.check_scene(scene)?;
        let block = self.kp_block(scene);
        Ok((0..self.n_keypoints)
            .map(|j| Vec2::new(block[3 * j] + self.theta_bb[2 * j], block[3 * j + 1] + self.theta_bb[2 * j + 1]))
            .collect())
    }

    /// Initializes trainable mask logits as `+-MASK_LOGIT` from binary masks.
    pub fn init_mask_logits(&mut self, masks: &[MaskImage]) -> Result<(), PerceptionError> {
        if masks.len() != self.n_scenes {
            return Err(PerceptionError::ShapeMismatch(format!("{} masks for {} scenes", masks.len(), self.n_scenes)));
        }
        let mut logits = Vec::with_capacity(self.n_scenes * self.width * self.height);
        for m in masks {
            if m.width != self.width || m.height != self.height {
                return Err(PerceptionError::ShapeMismatch("mask resolution".into()));
            }
            logits.extend(m.data.iter().map(|v| if *v >= 0.5 { MASK_LOGIT } else { -MASK_LOGIT }));
        }
        self.theta_seg = logits;
        Ok(())
    }
}

/// Bump logits for every channel of a scene.
pub fn heatmap_model_forward(params: &PerceptionParams, scene: usize) -> Result<HeatmapStack, PerceptionError> {
    let centers = params.centers(scene)?;
    let block = params.kp_block(scene);
    let mut h = HeatmapStack::zeros(params.n_keypoints, params.width, params.height);
    for (j, c) in centers.iter().enumerate() {
        let sharp = block[3 * j + 2].exp();
        for (i, dst) in h.channel_mut(j).iter_mut().enumerate() {
            let d = Vec2::new((i % params.width) as f64, (i / params.width) as f64) - c;
            *dst = -0.5 * sharp * d.norm_squared();
        }
    }
    Ok(h)
}

/// Pulls a heatmap cotangent back to the scene's parameter blocks.
pub fn heatmap_model_vjp(params: &PerceptionParams, scene: usize, cot: &HeatmapStack) -> Result<SceneGrad, PerceptionError> {
    let centers = params.centers(scene)?;
    if cot.n != params.n_keypoints || cot.width != params.width || cot.height != params.height {
        return Err(PerceptionError::ShapeMismatch("heatmap cotangent".into()));
    }
    let block = params.kp_block(scene);
    let mut g = SceneGrad::zeros(params, scene);
    for (j, c) in centers.iter().enumerate() {
        let sharp = block[3 * j + 2].exp();
        let (mut gc, mut gs) = (Vec2::zeros(), 0.0);
        for (i, gh) in cot.channel(j).iter().enumerate() {
            let d = Vec2::new((i % params.width) as f64, (i / params.width) as f64) - c;
            gc += d * (sharp * gh);
            gs += -0.5 * sharp * d.norm_squared() * gh;
        }
        g.kp[3 * j] = gc.x;
        g.kp[3 * j + 1] = gc.y;
        g.kp[3 * j + 2] = gs;
        g.bb[2 * j] = gc.x;
        g.bb[2 * j + 1] = gc.y;
    }
    Ok(g)
}

/// Keypoints of a scene: bump heatmaps followed by the spatial softmax.
pub fn predict_keypoints(params: &PerceptionParams, scene: usize, temperature: f64) -> Result<Vec<Vec2>, PerceptionError> {
    spatial_softmax(&heatmap_model_forward(params, scene)?, temperature)
}

/// Gradient of a keypoint loss with respect to the scene's parameters.
pub fn keypoints_vjp(params: &PerceptionParams, scene: usize, temperature: f64, g: &[Vec2]) -> Result<SceneGrad, PerceptionError> {
    let h = heatmap_model_forward(params, scene)?;
    heatmap_model_vjp(params, scene, &spatial_softmax_vjp(&h, temperature, g)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Oracle,
    Corrupted,
    Trainable,
}

impl std::str::FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "corrupted" => Ok(Self::Corrupted),
            "trainable" => Ok(Self::Trainable),
            other => Err(format!("unknown mask mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Erosion/dilation radius in pixels.
    pub radius: usize,
    /// Per-pixel flip probability.
    pub flip_rate: f64,
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self { radius: 1, flip_rate: 0.01, seed: 0 }
    }
}

fn morph(m: &MaskImage, r: usize, dilate: bool) -> MaskImage {
    let r = r as i64;
    ImageGrid::from_fn(m.width, m.height, |row, col| {
        let mut hit = !dilate;
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                let inside = rr >= 0 && cc >= 0 && rr < m.height as i64 && cc < m.width as i64;
                let on = inside && m.get(rr as usize, cc as usize) >= 0.5;
                if dilate {
                    hit |= on;
                } else {
                    hit &= on;
                }
            }
        }
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Segmentation-like damage: each 8x8 block is kept (p = 1/2), eroded (1/4)
/// or dilated (1/4) with a disk of the given radius, then every pixel flips
/// with probability `flip_rate`.
pub fn corrupt_mask(mask: &MaskImage, c: &Corruption, stream: u64) -> MaskImage {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    rng.set_stream(stream);
    let eroded = morph(mask, c.radius, false);
    let dilated = morph(mask, c.radius, true);
    let bx = mask.width.div_ceil(BLOCK);
    let by = mask.height.div_ceil(BLOCK);
    let choice: Vec<f64> = (0..bx * by).map(|_| rng.random()).collect();
    let mut out = ImageGrid::from_fn(mask.width, mask.height, |row, col| {
        let x = choice[(row / BLOCK) * bx + col / BLOCK];
        let src = if x < 0.5 {
            mask
        } else if x < 0.75 {
            &eroded
        } else {
            &dilated
        };
        if src.get(row, col) >= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    for v in &mut out.data {
        if rng.random::<f64>() < c.flip_rate {
            *v = 1.0 - *v;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-scene foreground masks in the three supported modes.
#[derive(Debug, Clone)]
pub struct MaskProvider {
    pub oracle: Vec<MaskImage>,
    pub corrupted: Vec<MaskImage>,
    pub corruption: Corruption,
}

impl MaskProvider {
    /// `oracle` masks are binary ground truth at the true pose.
    pub fn new(oracle: Vec<MaskImage>, corruption: Corruption) -> Self {
        let corrupted = oracle.iter().enumerate().map(|(i, m)| corrupt_mask(m, &corruption, i as u64)).collect();
        Self { oracle, corrupted, corruption }
    }

    pub fn len(&self) -> usize {
        self.oracle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oracle.is_empty()
    }

    pub fn mask(&self, scene: usize, mode: MaskMode, params: &PerceptionParams) -> Result<MaskImage, PerceptionError> {
        if scene >= self.oracle.len() {
            return Err(PerceptionError::UnknownScene(scene, self.oracle.len()));
        }
        match mode {
            MaskMode::Oracle => Ok(self.oracle[scene].clone()),
            MaskMode::Corrupted => Ok(self.corrupted[scene].clone()),
            MaskMode::Trainable => {
                if params.theta_seg.is_empty() {
                    return Err(PerceptionError::NoMaskLogits);
                }
                params.check_scene(scene)?;
                Ok(ImageGrid {
                    width: params.width,
                    height: params.height,
                    data: params.seg_block(scene).iter().map(|l| sigmoid(*l)).collect(),
                })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SceneEntry {
    centers: Vec<[f64; 2]>,
    log_sharpness: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    n_keypoints: usize,
    width: usize,
    height: usize,
    offsets: Vec<[f64; 2]>,
    scenes: BTreeMap<usize, SceneEntry>,
    mask_logits_path: Option<String>,
}

impl PerceptionParams {
    /// Writes the checkpoint JSON and, if masks are trainable, a sibling
    /// `<stem>_mask_logits.json`. Returns the written paths.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>, PerceptionError> {
        let io = |p: &Path| {
            let p = p.to_owned();
            move |source| PerceptionError::Io { path: p, source }
        };
        let mut written = Vec::new();
        let mask_logits_path = if self.theta_seg.is_empty() {
            None
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            let name = format!("{stem}_mask_logits.json");
            let p = path.with_file_name(&name);
            let blocks: Vec<&[f64]> = (0..self.n_scenes).map(|s| self.seg_block(s)).collect();
            let text = serde_json::to_string(&blocks).map_err(|source| PerceptionError::Json { path: p.clone(), source })?;
            fs::write(&p, text).map_err(io(&p))?;
            written.push(p);
            Some(name)
        };
        let ck = Checkpoint {
            n_keypoints: self.n_keypoints,
            width: self.width,
            height: self.height,
            offsets: self.theta_bb.chunks(2).map(|c| [c[0], c[1]]).collect(),
            scenes: (0..self.n_scenes)
                .map(|s| {
                    let b = self.kp_block(s);
                    let entry = SceneEntry {
                        centers: b.chunks(3).map(|c| [c[0], c[1]]).collect(),
                        log_sharpness: b.chunks(3).map(|c| c[2]).collect(),
                    };
                    (s, entry)
                })
                .collect(),
            mask_logits_path,
        };
        let text = serde_json::to_string_pretty(&ck).map_err(|source| PerceptionError::Json { path: path.to_owned(), source })?;
        fs::write(path, text + "\n").map_err(io(path))?;
        written.insert(0, path.to_owned());
        Ok(written)
    }

    pub fn load(path: &Path) -> Result<Self, PerceptionError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|source| PerceptionError::Io { path: p.to_owned(), source });
        let ck: Checkpoint =
            serde_json::from_str(&read(path)?).map_err(|source| PerceptionError::Json { path: path.to_owned(), source })?;
        let n = ck.n_keypoints;
        if ck.offsets.len() != n {
            return Err(PerceptionError::ShapeMismatch("offsets".into()));
        }
        let n_scenes = ck.scenes.len();
        let mut theta_kp = Vec::with_capacity(n_scenes * 3 * n);
        for (i, (id, e)) in ck.scenes.iter().enumerate() {
            if *id != i || e.centers.len() != n || e.log_sharpness.len() != n {
                return Err(PerceptionError::ShapeMismatch(format!("scene entry {id}")));
            }
            for (c, s) in e.centers.iter().zip(&e.log_sharpness) {
                theta_kp.extend([c[0], c[1], *s]);
            }
        }
        let theta_seg = match &ck.mask_logits_path {
            None => Vec::new(),
            Some(name) => {
                let p = path.with_file_name(name);
                let blocks: Vec<Vec<f64>> =
                    serde_json::from_str(&read(&p)?).map_err(|source| PerceptionError::Json { path: p.clone(), source })?;
                if blocks.len() != n_scenes || blocks.iter().any(|b| b.len() != ck.width * ck.height) {
                    return Err(PerceptionError::ShapeMismatch("mask logits".into()));
                }
                blocks.concat()
            }
        };
        Ok(Self {
            n_keypoints: n,
            n_scenes,
            width: ck.width,
            height: ck.height,
            theta_kp,
            theta_seg,
            theta_bb: ck.offsets.iter().flat_map(|o| [o[0], o[1]]).collect(),
        })
    }
}
