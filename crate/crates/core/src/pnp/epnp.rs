//! Closed-form initialization by control-point linearization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::geometry::{project_point, CameraIntrinsics, Mat3, Pose, Vec3, Z_MIN};

use super::Correspondences;

/// Candidate camera poses, best reprojection error first, plus whether the
/// 3D points are (near) coplanar.
pub(crate) fn epnp(c: &Correspondences, k: &CameraIntrinsics) -> (Vec<Pose>, bool) {
    let n = c.len();
    let centroid = c.points3d.iter().sum::<Vec3>() / n as f64;
    let mut cov = Mat3::zeros();
    for p in &c.points3d {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s = order.map(|i| eig.eigenvalues[i].max(0.0));
    let planar = s[0] <= 0.0 || s[2] / s[0] < 1e-10;

    let m = if planar { 3 } else { 4 };
    let mut ctrl = vec![centroid];
    for &i in order.iter().take(m - 1) {
        let scale = (eig.eigenvalues[i].max(0.0) / n as f64).sqrt().max(1e-9);
        ctrl.push(centroid + eig.eigenvectors.column(i).into_owned() * scale);
    }

    // barycentric coordinates in the control-point basis
    let basis = DMatrix::from_fn(3, m - 1, |r, j| ctrl[j + 1][r] - centroid[r]);
    let Ok(pinv) = basis.clone().pseudo_inverse(1e-15) else { return (Vec::new(), planar) };
    let alphas: Vec<Vec<f64>> = c
        .points3d
        .iter()
        .map(|p| {
            let d = DVector::from_column_slice((p - centroid).as_slice());
            let a = &pinv * d;
            let mut row = vec![1.0 - a.sum()];
            row.extend(a.iter());
            row
        })
        .collect();

    let mut mm = DMatrix::zeros(2 * n, 3 * m);
    for (i, (a, o)) in alphas.iter().zip(&c.points2d).enumerate() {
        for j in 0..m {
            mm[(2 * i, 3 * j)] = a[j] * k.fx;
            mm[(2 * i, 3 * j + 2)] = a[j] * (k.cx - o.x);
            mm[(2 * i + 1, 3 * j + 1)] = a[j] * k.fy;
            mm[(2 * i + 1, 3 * j + 2)] = a[j] * (k.cy - o.y);
        }
    }
    let mtm = mm.transpose() * &mm;
    let eig = SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..3 * m).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: Vec<DVector<f64>> = idx.iter().take(3).map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let world_d2: Vec<f64> = pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()).collect();

    let mut found: Vec<(f64, Pose)> = Vec::new();
    let max_dim = if planar { 2 } else { 3 };
    for dim in 1..=max_dim {
        let Some(betas) = linearized_betas(&kernel[..dim], &pairs, &world_d2) else { continue };
        let betas = refine_betas(&kernel[..dim], &pairs, &world_d2, betas);
        let Some(pose) = pose_from_betas(&kernel[..dim], &betas, &alphas, c, m) else { continue };
        let err = reprojection_error(c, k, &pose);
        if err.is_finite() {
            found.push((err, pose));
        }
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    (found.into_iter().map(|(_, p)| p).collect(), planar)
}

fn ctrl_diff(v: &DVector<f64>, a: usize, b: usize) -> Vec3 {
    Vec3::new(v[3 * a] - v[3 * b], v[3 * a + 1] - v[3 * b + 1], v[3 * a + 2] - v[3 * b + 2])
}

/// Least-squares solve for the products `beta_a * beta_b` from the distance
/// constraints, then read off the betas.
fn linearized_betas(kernel: &[DVector<f64>], pairs: &[(usize, usize)], world_d2: &[f64]) -> Option<Vec<f64>> {
    let dim = kernel.len();
    let prods: Vec<(usize, usize)> = (0..dim).flat_map(|a| (a..dim).map(move |b| (a, b))).collect();
    if prods.len() > pairs.len() {
        return None;
    }
    let l = DMatrix::from_fn(pairs.len(), prods.len(), |r, c| {
        let (a, b) = pairs[r];
        let (i, j) = prods[c];
        let f = if i == j { 1.0 } else { 2.0 };
        f * ctrl_diff(&kernel[i], a, b).dot(&ctrl_diff(&kernel[j], a, b))
    });
    let rho = DVector::from_column_slice(world_d2);
    let sol = l.svd(true, true).solve(&rho, 1e-14).ok()?;
    let b11 = sol[0];
    let mut betas = vec![b11.abs().sqrt()];
    for j in 1..dim {
        // product column index of (0, j)
        let c0j = prods.iter().position(|&p| p == (0, j))?;
        let cjj = prods.iter().position(|&p| p == (j, j))?;
        let mag = sol[cjj].abs().sqrt();
        betas.push(if sol[c0j] * b11 >= 0.0 { mag } else { -mag });
    }
    if b11 < 0.0 {
        for b in &mut betas {
            *b = -*b;
        }
    }
    Some(betas)
}

fn refine_betas(kernel: &[DVector<f64>], pairs: &[(usize, usize)], world_d2: &[f64], mut betas: Vec<f64>) -> Vec<f64> {
    let dim = kernel.len();
    for _ in 0..10 {
        let x: DVector<f64> = kernel.iter().zip(&betas).map(|(v, b)| v * *b).fold(DVector::zeros(kernel[0].len()), |a, v| a + v);
        let mut jac = DMatrix::zeros(pairs.len(), dim);
        let mut res = DVector::zeros(pairs.len());
        for (r, &(a, b)) in pairs.iter().enumerate() {
            let d = ctrl_diff(&x, a, b);
            res[r] = world_d2[r] - d.norm_squared();
            for j in 0..dim {
                jac[(r, j)] = 2.0 * d.dot(&ctrl_diff(&kernel[j], a, b));
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-14) else { break };
        for (b, s) in betas.iter_mut().zip(step.iter()) {
            *b += s;
        }
        if step.norm() < 1e-14 {
            break;
        }
    }
    betas
}

fn pose_from_betas(kernel: &[DVector<f64>], betas: &[f64], alphas: &[Vec<f64>], c: &Correspondences, m: usize) -> Option<Pose> {
    let x: DVector<f64> = kernel.iter().zip(betas).map(|(v, b)| v * *b).fold(DVector::zeros(3 * m), |a, v| a + v);
    let mut cam: Vec<Vec3> = alphas
        .iter()
        .map(|a| (0..m).map(|j| Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]) * a[j]).sum())
        .collect();
    if cam.iter().filter(|p| p.z < 0.0).count() * 2 > cam.len() {
        for p in &mut cam {
            *p = -*p;
        }
    }
    if !cam.iter().all(|p| p.z > Z_MIN) {
        return None;
    }
    Some(kabsch(&c.points3d, &cam))
}

/// Rigid transform minimizing `sum |R a_i + t - b_i|^2`.
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Pose {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    Pose { rotation: r, translation: cb - r * ca }
}

fn reprojection_error(c: &Correspondences, k: &CameraIntrinsics, pose: &Pose) -> f64 {
    c.points3d
        .iter()
        .zip(&c.points2d)
        .map(|(p, o)| match project_point(&pose.transform_point(p), k) {
            Ok(uv) => (uv - o).norm_squared(),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Tangent};

    #[test]
    fn kabsch_recovers_transform() {
        let t = se3_exp(&Tangent::new(Vec3::new(0.3, -0.2, 1.1), Vec3::new(0.5, 0.1, -2.0)));
        let a: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.1, (i as f64).sin())).collect();
        let b: Vec<Vec3> = a.iter().map(|p| t.transform_point(p)).collect();
        let r = kabsch(&a, &b);
        assert!((r.rotation - t.rotation).amax() < 1e-12);
        assert!((r.translation - t.translation).amax() < 1e-12);
    }
}
