use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use super::kdtree::KdTree;
use super::mesh::PointCloud;
use crate::error::{invalid, Result};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source points onto the target: `x ↦ R x + t`.
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    /// RMSE after alignment divided by the target bounding-box diagonal.
    pub rmse: f64,
    /// RMSE after alignment in world units.
    pub rmse_world: f64,
    pub iterations: usize,
    /// Correspondence RMSE (world units) at the start of every iteration and
    /// after the final alignment.
    pub history: Vec<f64>,
}

fn check_cloud(c: &PointCloud, what: &str) -> Result<()> {
    if c.points.len() < 3 {
        return Err(invalid(format!("{what} cloud needs at least 3 points")));
    }
    if c.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(invalid(format!("{what} cloud has non-finite points")));
    }
    let mean = centroid(&c.points);
    let cov: Matrix3<f64> = c
        .points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum();
    let eig = SymmetricEigen::new(cov / c.points.len() as f64);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    // Collinear or coincident points leave two vanishing directions.
    if ev[1] <= 1e-12 * ev[2].max(1e-300) {
        return Err(invalid(format!(
            "{what} cloud is degenerate (collinear or coincident points)"
        )));
    }
    Ok(())
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Best rotation and translation mapping `src[i]` onto `dst[i]` in the
/// least-squares sense.
pub(crate) fn kabsch(src: &[Vec3], dst: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let cs = centroid(src);
    let cd = centroid(dst);
    let h: Matrix3<f64> = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (s - cs) * (d - cd).transpose())
        .sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    (r, cd - r * cs)
}

/// Point-to-point ICP with centroid initialization. Stops when the RMSE
/// improves by less than `tol` or after `max_iters` iterations.
pub fn icp_rmse(
    source: &PointCloud,
    target: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult> {
    check_cloud(source, "source")?;
    check_cloud(target, "target")?;
    let tree = KdTree::new(&target.points);
    let mut rotation = Matrix3::identity();
    let mut translation = centroid(&target.points) - centroid(&source.points);
    let mut history = Vec::new();
    let mut iterations = 0;
    let correspond = |r: &Matrix3<f64>, t: &Vec3| -> (Vec<Vec3>, Vec<Vec3>, f64) {
        let pairs: Vec<(Vec3, usize, f64)> = source
            .points
            .par_iter()
            .map(|p| {
                let x = r * p + t;
                let (j, d2) = tree.nearest(&x).unwrap();
                (*p, j, d2)
            })
            .collect();
        let rmse = (pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64).sqrt();
        let src = pairs.iter().map(|p| p.0).collect();
        let dst = pairs.iter().map(|p| target.points[p.1]).collect();
        (src, dst, rmse)
    };
    let (mut src, mut dst, mut rmse) = correspond(&rotation, &translation);
    history.push(rmse);
    while iterations < max_iters {
        iterations += 1;
        let (r, t) = kabsch(&src, &dst);
        let (s2, d2, next) = correspond(&r, &t);
        // Keep the previous pose if re-matching made things worse (only
        // possible through rounding).
        if next > rmse {
            break;
        }
        rotation = r;
        translation = t;
        history.push(next);
        let improvement = rmse - next;
        (src, dst, rmse) = (s2, d2, next);
        if improvement < tol {
            break;
        }
    }
    let bounds = target
        .points
        .iter()
        .fold((target.points[0], target.points[0]), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
    let diag = (bounds.1 - bounds.0).norm();
    Ok(IcpResult {
        rotation,
        translation,
        rmse: rmse / diag,
        rmse_world: rmse,
        iterations,
        history,
    })
}
