//! Soft silhouette rasterizer with analytic pose gradients.
//!
//! Each pixel looks at the projected triangles within `blur_radius` of its
//! center (or containing it), keeps the `k_nearest` with the largest
//! coverage, and blends them as
//!
//! ```text
//! D_j = sigmoid(delta_j * d_j^2 / sigma),   S = 1 - prod_j (1 - D_j)
//! ```
//!
//! where `d_j` is the pixel-space distance to the triangle boundary and
//! `delta_j` is +1 inside, -1 outside. Silhouettes are depth independent, so
//! there is no z-buffer: triangles entirely behind the near plane are culled
//! and partially visible ones are clipped against it.
//!
//! Pixel rows are evaluated in parallel. The backward pass collects per-row
//! contributions and reduces them in pixel-major order, so gradients are
//! bit-identical between sequential and parallel execution.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3x6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geometry::{project_with_jacobian, CameraIntrinsics, Vec2, Vec3, Z_MIN};
use crate::grid::{GridError, ImageGrid};
use crate::kinematics::{camera_points_pose_vjp, TriangleMesh};

pub type SilhouetteImage = ImageGrid;

const TILE: usize = 8;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("no triangle projects inside the image")]
    EmptyFrustum,
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Triangles blended per pixel.
    pub k_nearest: usize,
    /// Edge softness in squared normalized device units, where one unit is
    /// half the shorter image side.
    pub sigma: f64,
    /// Candidate search radius around each pixel center, in pixels.
    pub blur_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { k_nearest: 20, sigma: 2.5e-5, blur_radius: 2.0 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.k_nearest < 1 {
            return Err(RenderError::InvalidConfig("k_nearest must be at least 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(RenderError::InvalidConfig("sigma must be positive".into()));
        }
        if !(self.blur_radius >= 0.0) {
            return Err(RenderError::InvalidConfig("blur_radius must be non-negative".into()));
        }
        Ok(())
    }

    /// `sigma` converted to squared pixels for an image of the given size.
    pub fn sigma_pixels(&self, width: usize, height: usize) -> f64 {
        let half = 0.5 * width.min(height) as f64;
        self.sigma * half * half
    }
}

/// A projected vertex and how it depends on the camera-frame mesh vertices.
#[derive(Debug, Clone)]
struct ScreenVertex {
    uv: Vec2,
    sources: [(usize, Matrix2x3<f64>); 2],
    n_sources: usize,
}

#[derive(Debug, Clone)]
struct ScreenTri {
    v: [usize; 3],
    p: [Vec2; 3],
    /// Twice the signed area.
    area2: f64,
    lo: Vec2,
    hi: Vec2,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    tri: u32,
    coverage: f64,
    /// `1 - coverage`, kept separately so deep-inside pixels keep precision.
    uncovered: f64,
    inside: bool,
    edge: u8,
    t: f64,
    closest: Vec2,
}

/// A mesh prepared for repeated forward/backward evaluation.
pub struct SoftRasterizer {
    width: usize,
    height: usize,
    k_nearest: usize,
    sigma_px: f64,
    blur_radius: f64,
    n_mesh_vertices: usize,
    verts: Vec<ScreenVertex>,
    tris: Vec<ScreenTri>,
    tiles_x: usize,
    tiles: Vec<Vec<u32>>,
}

impl SoftRasterizer {
    pub fn new(mesh: &TriangleMesh, k: &CameraIntrinsics, cfg: &RenderConfig) -> Result<Self, RenderError> {
        cfg.validate()?;
        if mesh.triangles.is_empty() {
            return Err(RenderError::EmptyMesh);
        }
        let mut verts: Vec<ScreenVertex> = Vec::with_capacity(mesh.vertices.len());
        let mut projected: Vec<Option<usize>> = vec![None; mesh.vertices.len()];
        let mut tris = Vec::with_capacity(mesh.triangles.len());

        let mut original = |i: usize, verts: &mut Vec<ScreenVertex>| -> usize {
            if let Some(s) = projected[i] {
                return s;
            }
            let (uv, j) = project_with_jacobian(&mesh.vertices[i], k).expect("vertex in front of near plane");
            verts.push(ScreenVertex { uv, sources: [(i, j), (i, Matrix2x3::zeros())], n_sources: 1 });
            projected[i] = Some(verts.len() - 1);
            verts.len() - 1
        };

        for tri in &mesh.triangles {
            let front = tri.map(|i| mesh.vertices[i].z > Z_MIN);
            let n_front = front.iter().filter(|f| **f).count();
            if n_front == 0 {
                continue;
            }
            let polygon: Vec<usize> = if n_front == 3 {
                tri.iter().map(|&i| original(i, &mut verts)).collect()
            } else {
                // Sutherland-Hodgman against z = Z_MIN.
                let mut poly = Vec::with_capacity(4);
                for e in 0..3 {
                    let (a, b) = (tri[e], tri[(e + 1) % 3]);
                    let (fa, fb) = (front[e], front[(e + 1) % 3]);
                    if fa {
                        poly.push(original(a, &mut verts));
                    }
                    if fa != fb {
                        let (f, r) = if fa { (a, b) } else { (b, a) };
                        verts.push(clip_vertex(f, r, &mesh.vertices, k));
                        poly.push(verts.len() - 1);
                    }
                }
                poly
            };
            for t in 1..polygon.len() - 1 {
                let v = [polygon[0], polygon[t], polygon[t + 1]];
                let p = v.map(|i| verts[i].uv);
                let area2 = cross2(&(p[1] - p[0]), &(p[2] - p[0]));
                let lo = Vec2::new(p[0].x.min(p[1].x).min(p[2].x), p[0].y.min(p[1].y).min(p[2].y));
                let hi = Vec2::new(p[0].x.max(p[1].x).max(p[2].x), p[0].y.max(p[1].y).max(p[2].y));
                tris.push(ScreenTri { v, p, area2, lo, hi });
            }
        }

        let (width, height) = (k.width, k.height);
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        let r = cfg.blur_radius;
        let mut any = false;
        for (ti, t) in tris.iter().enumerate() {
            let c0 = (t.lo.x - r).ceil().max(0.0);
            let c1 = (t.hi.x + r).floor().min(width as f64 - 1.0);
            let r0 = (t.lo.y - r).ceil().max(0.0);
            let r1 = (t.hi.y + r).floor().min(height as f64 - 1.0);
            if !(c0 <= c1 && r0 <= r1) {
                continue;
            }
            any = true;
            let (c0, c1, r0, r1) = (c0 as usize, c1 as usize, r0 as usize, r1 as usize);
            for ty in r0 / TILE..=r1 / TILE {
                for tx in c0 / TILE..=c1 / TILE {
                    tiles[ty * tiles_x + tx].push(ti as u32);
                }
            }
        }
        if !any {
            return Err(RenderError::EmptyFrustum);
        }

        Ok(Self {
            width,
            height,
            k_nearest: cfg.k_nearest,
            sigma_px: cfg.sigma_pixels(width, height),
            blur_radius: r,
            n_mesh_vertices: mesh.vertices.len(),
            verts,
            tris,
            tiles_x,
            tiles,
        })
    }

    fn candidates(&self, row: usize, col: usize, out: &mut Vec<Candidate>) {
        out.clear();
        let px = Vec2::new(col as f64, row as f64);
        let r = self.blur_radius;
        let r2 = r * r;
        for &ti in &self.tiles[(row / TILE) * self.tiles_x + col / TILE] {
            let t = &self.tris[ti as usize];
            if px.x < t.lo.x - r || px.x > t.hi.x + r || px.y < t.lo.y - r || px.y > t.hi.y + r {
                continue;
            }
            let (d2, edge, tt, closest) = boundary_distance(&t.p, &px);
            let inside = point_in_triangle(&t.p, t.area2, &px);
            if !inside && d2 > r2 {
                continue;
            }
            let x = if inside { d2 / self.sigma_px } else { -d2 / self.sigma_px };
            let (coverage, uncovered) = sigmoid_pair(x);
            let cand = Candidate { tri: ti, coverage, uncovered, inside, edge, t: tt, closest };
            insert_top_k(out, cand, self.k_nearest);
        }
    }

    fn pixel_value(&self, cands: &[Candidate]) -> f64 {
        1.0 - cands.iter().map(|c| c.uncovered).product::<f64>()
    }

    pub fn forward(&self, exec: Execution) -> SilhouetteImage {
        let rows = exec.map_indices(self.height, |row| {
            let mut cands = Vec::with_capacity(self.k_nearest + 1);
            (0..self.width)
                .map(|col| {
                    self.candidates(row, col, &mut cands);
                    self.pixel_value(&cands)
                })
                .collect::<Vec<f64>>()
        });
        ImageGrid { width: self.width, height: self.height, data: rows.concat() }
    }

    /// Coverage values `D_j` of the blended triangles at one pixel.
    pub fn pixel_coverages(&self, row: usize, col: usize) -> Vec<f64> {
        let mut c = Vec::new();
        self.candidates(row, col, &mut c);
        c.iter().map(|c| c.coverage).collect()
    }

    /// Gradient of `sum(cotangent * S)` with respect to each camera-frame mesh vertex.
    pub fn backward_vertices(&self, cotangent: &ImageGrid, exec: Execution) -> Result<Vec<Vec3>, RenderError> {
        if cotangent.width != self.width || cotangent.height != self.height {
            return Err(GridError::ShapeMismatch(self.width, self.height, cotangent.width, cotangent.height).into());
        }
        let rows = exec.map_indices(self.height, |row| {
            let mut cands = Vec::with_capacity(self.k_nearest + 1);
            let mut contrib: Vec<(usize, Vec2)> = Vec::new();
            let mut others = Vec::with_capacity(self.k_nearest);
            for col in 0..self.width {
                let g = cotangent.get(row, col);
                if g == 0.0 {
                    continue;
                }
                self.candidates(row, col, &mut cands);
                if cands.is_empty() {
                    continue;
                }
                // prod_{i != j} (1 - D_i) via prefix/suffix products
                others.clear();
                let mut prefix = 1.0;
                for c in cands.iter() {
                    others.push(prefix);
                    prefix *= c.uncovered;
                }
                let mut suffix = 1.0;
                for (j, c) in cands.iter().enumerate().rev() {
                    others[j] *= suffix;
                    suffix *= c.uncovered;
                }
                let px = Vec2::new(col as f64, row as f64);
                for (c, &rest) in cands.iter().zip(&others) {
                    let sign = if c.inside { 1.0 } else { -1.0 };
                    let scale = g * rest * c.coverage * c.uncovered * sign / self.sigma_px;
                    if scale == 0.0 {
                        continue;
                    }
                    let tri = &self.tris[c.tri as usize];
                    let e = c.edge as usize;
                    let diff = (px - c.closest) * (-2.0 * scale);
                    contrib.push((tri.v[e], diff * (1.0 - c.t)));
                    contrib.push((tri.v[(e + 1) % 3], diff * c.t));
                }
            }
            contrib
        });

        let mut screen_grad = vec![Vec2::zeros(); self.verts.len()];
        for row in rows {
            for (v, g) in row {
                screen_grad[v] += g;
            }
        }
        let mut grad = vec![Vec3::zeros(); self.n_mesh_vertices];
        for (sv, g) in self.verts.iter().zip(&screen_grad) {
            for (src, j) in &sv.sources[..sv.n_sources] {
                grad[*src] += j.transpose() * g;
            }
        }
        Ok(grad)
    }
}

impl SoftRasterizer {
    /// Forward-mode derivative of every pixel with respect to a 6-vector
    /// parameter, given `d(vertex)/d(param)` for each camera-frame mesh vertex.
    /// Row-major, one entry per pixel.
    pub fn pixel_jacobians(&self, vertex_jac: &[Matrix3x6<f64>], exec: Execution) -> Result<Vec<Vector6<f64>>, RenderError> {
        if vertex_jac.len() != self.n_mesh_vertices {
            return Err(RenderError::InvalidConfig(format!(
                "expected {} vertex Jacobians, got {}",
                self.n_mesh_vertices,
                vertex_jac.len()
            )));
        }
        let screen: Vec<Matrix2x6<f64>> = self
            .verts
            .iter()
            .map(|sv| sv.sources[..sv.n_sources].iter().map(|(src, j)| j * vertex_jac[*src]).sum())
            .collect();
        let rows = exec.map_indices(self.height, |row| {
            let mut cands = Vec::with_capacity(self.k_nearest + 1);
            let mut out = vec![Vector6::zeros(); self.width];
            for (col, o) in out.iter_mut().enumerate() {
                self.candidates(row, col, &mut cands);
                let px = Vec2::new(col as f64, row as f64);
                for (j, c) in cands.iter().enumerate() {
                    let rest: f64 = cands.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, c)| c.uncovered).product();
                    let sign = if c.inside { 1.0 } else { -1.0 };
                    let scale = rest * c.coverage * c.uncovered * sign / self.sigma_px;
                    if scale == 0.0 {
                        continue;
                    }
                    let tri = &self.tris[c.tri as usize];
                    let e = c.edge as usize;
                    let dp = screen[tri.v[e]] * (1.0 - c.t) + screen[tri.v[(e + 1) % 3]] * c.t;
                    *o += dp.transpose() * ((c.closest - px) * (2.0 * scale));
                }
            }
            out
        });
        Ok(rows.concat())
    }
}

/// Renders the soft silhouette of a camera-frame mesh.
pub fn render_silhouette(mesh: &TriangleMesh, k: &CameraIntrinsics, cfg: &RenderConfig) -> Result<SilhouetteImage, RenderError> {
    render_silhouette_with(mesh, k, cfg, Execution::default())
}

pub fn render_silhouette_with(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    exec: Execution,
) -> Result<SilhouetteImage, RenderError> {
    Ok(SoftRasterizer::new(mesh, k, cfg)?.forward(exec))
}

/// Pulls an image cotangent back to the left-perturbation tangent of the
/// camera-to-robot pose that placed `mesh` in the camera frame.
pub fn render_backward(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    image_cotangent: &ImageGrid,
) -> Result<Vector6<f64>, RenderError> {
    render_backward_with(mesh, k, cfg, image_cotangent, Execution::default())
}

pub fn render_backward_with(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    cfg: &RenderConfig,
    image_cotangent: &ImageGrid,
    exec: Execution,
) -> Result<Vector6<f64>, RenderError> {
    let raster = SoftRasterizer::new(mesh, k, cfg)?;
    let g = raster.backward_vertices(image_cotangent, exec)?;
    Ok(camera_points_pose_vjp(&mesh.vertices, &g))
}

/// Binary coverage of pixel centers by any projected triangle, by brute force.
/// Triangles with a vertex behind the near plane are skipped.
pub fn hard_rasterize(mesh: &TriangleMesh, k: &CameraIntrinsics) -> ImageGrid {
    let projected: Vec<Option<Vec2>> = mesh
        .vertices
        .iter()
        .map(|v| crate::geometry::project_point(v, k).ok())
        .collect();
    let tris: Vec<[Vec2; 3]> = mesh
        .triangles
        .iter()
        .filter_map(|t| Some([projected[t[0]]?, projected[t[1]]?, projected[t[2]]?]))
        .collect();
    ImageGrid::from_fn(k.width, k.height, |row, col| {
        let px = Vec2::new(col as f64, row as f64);
        let hit = tris.iter().any(|p| {
            let area2 = cross2(&(p[1] - p[0]), &(p[2] - p[0]));
            point_in_triangle(p, area2, &px)
        });
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

fn clip_vertex(front: usize, behind: usize, v: &[Vec3], k: &CameraIntrinsics) -> ScreenVertex {
    let (a, b) = (v[front], v[behind]);
    let zn = Z_MIN;
    let dz = a.z - b.z;
    let s = (a.z - zn) / dz;
    let c = a + (b - a) * s;
    let ds_da = (zn - b.z) / (dz * dz);
    let ds_db = (a.z - zn) / (dz * dz);
    let (fx, fy) = (k.fx / zn, k.fy / zn);
    let uv = Vec2::new(fx * c.x + k.cx, fy * c.y + k.cy);
    let ja = Matrix2x3::new(fx * (1.0 - s), 0.0, fx * (b.x - a.x) * ds_da, 0.0, fy * (1.0 - s), fy * (b.y - a.y) * ds_da);
    let jb = Matrix2x3::new(fx * s, 0.0, fx * (b.x - a.x) * ds_db, 0.0, fy * s, fy * (b.y - a.y) * ds_db);
    ScreenVertex { uv, sources: [(front, ja), (behind, jb)], n_sources: 2 }
}

fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn point_in_triangle(p: &[Vec2; 3], area2: f64, x: &Vec2) -> bool {
    if area2.abs() < 1e-12 {
        return false;
    }
    let s = area2.signum();
    (0..3).all(|e| {
        let a = p[e];
        let b = p[(e + 1) % 3];
        s * cross2(&(b - a), &(x - a)) >= 0.0
    })
}

/// Squared distance to the triangle boundary, the closest edge, its segment
/// parameter and the closest point.
fn boundary_distance(p: &[Vec2; 3], x: &Vec2) -> (f64, u8, f64, Vec2) {
    let mut best = (f64::INFINITY, 0u8, 0.0, p[0]);
    for e in 0..3 {
        let a = p[e];
        let ab = p[(e + 1) % 3] - a;
        let denom = ab.norm_squared();
        let t = if denom > 0.0 { ((x - a).dot(&ab) / denom).clamp(0.0, 1.0) } else { 0.0 };
        let c = a + ab * t;
        let d2 = (x - c).norm_squared();
        if d2 < best.0 {
            best = (d2, e as u8, t, c);
        }
    }
    best
}

/// `(sigmoid(x), 1 - sigmoid(x))` without cancellation.
fn sigmoid_pair(x: f64) -> (f64, f64) {
    if x >= 0.0 {
        let e = (-x).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = x.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Keeps `list` sorted by descending coverage (ties by triangle index) and at most `k` long.
fn insert_top_k(list: &mut Vec<Candidate>, cand: Candidate, k: usize) {
    let pos = list
        .iter()
        .position(|c| cand.coverage > c.coverage || (cand.coverage == c.coverage && cand.tri < c.tri))
        .unwrap_or(list.len());
    if pos >= k {
        return;
    }
    list.insert(pos, cand);
    list.truncate(k);
}
