//! Explicit geometry from a trained field: volume baking, marching cubes,
//! surface sampling and ICP-based evaluation.

mod icp;
mod kdtree;
mod marching;
mod mesh;
mod tables;

pub use icp::{icp_rmse, IcpResult};
pub use kdtree::KdTree;
pub use marching::marching_cubes;
pub use mesh::{sample_points, PointCloud, TriangleMesh};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::OpacityField;
use crate::geometry::Aabb;
use crate::Vec3;

/// Raw value assigned to lattice nodes outside a field's support, where the
/// opacity is exactly zero. `softplus(-30)` is about 1e-13.
pub const EMPTY_RAW: f64 = -30.0;

/// Cubic lattice of raw field values. Nodes span `bounds` inclusively, x
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub resolution: usize,
    pub bounds: Aabb,
    pub values: Vec<f64>,
}

impl ScalarVolume {
    pub fn from_fn(
        resolution: usize,
        bounds: Aabb,
        f: impl Fn(&Vec3) -> f64 + Sync,
    ) -> Result<Self> {
        if resolution < 8 {
            return Err(invalid(format!(
                "volume resolution must be at least 8, got {resolution}"
            )));
        }
        let e = bounds.extent();
        if e.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("volume bounds are degenerate"));
        }
        let mut vol = Self {
            resolution,
            bounds,
            values: Vec::new(),
        };
        let r = resolution;
        vol.values = (0..r * r * r)
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx % r, (idx / r) % r, idx / (r * r));
                f(&vol.position(i, j, k))
            })
            .collect();
        Ok(vol)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let step = self.bounds.extent() / (self.resolution - 1) as f64;
        self.bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    }

    pub fn cell_size(&self) -> Vec3 {
        self.bounds.extent() / (self.resolution - 1) as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            resolution: self.resolution,
            bounds: self.bounds,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Sample the raw (pre-activation) field once per lattice node.
pub fn bake_volume<F: OpacityField + ?Sized>(
    field: &F,
    bounds: &Aabb,
    resolution: usize,
) -> Result<ScalarVolume> {
    ScalarVolume::from_fn(resolution, *bounds, |x| field.raw(x).unwrap_or(EMPTY_RAW))
}

/// Evaluation crop: object bounds with everything at or below
/// `ground + margin` removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub bounds: Aabb,
    pub ground: Option<f64>,
    pub margin: f64,
}

impl Crop {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.bounds.contains(p) && self.ground.is_none_or(|g| p.z > g + self.margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    /// RMSE after ICP, in units of the target bounding-box diagonal.
    pub rmse: f64,
    pub rmse_normalization: String,
    pub iters: usize,
    pub crop_bounds: Aabb,
    pub iso: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resolution: Option<usize>,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub points: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            points: 5000,
            seed: 0,
            max_iters: 50,
            tol: 1e-7,
        }
    }
}

/// Crop both meshes, sample clouds and align the prediction to the ground
/// truth with ICP.
pub fn evaluate_meshes(
    predicted: &TriangleMesh,
    ground_truth: &TriangleMesh,
    crop: &Crop,
    settings: &EvalSettings,
) -> Result<IcpResult> {
    let pred = predicted.cropped(crop);
    let gt = ground_truth.cropped(crop);
    if pred.faces.is_empty() {
        return Err(invalid(
            "predicted mesh is empty inside the evaluation crop",
        ));
    }
    if gt.faces.is_empty() {
        return Err(invalid(
            "ground-truth mesh is empty inside the evaluation crop",
        ));
    }
    // One seed for both clouds, so a mesh compared with itself scores zero.
    let src = sample_points(&pred, settings.points, settings.seed)?;
    let dst = sample_points(&gt, settings.points, settings.seed)?;
    icp_rmse(&src, &dst, settings.max_iters, settings.tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{initial_raw, GridField};

    #[test]
    fn constant_field_bakes_constant() {
        let g = GridField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        let v = bake_volume(&g, &Aabb::cube(1.0), 8).unwrap();
        assert_eq!(v.values.len(), 512);
        assert!(v.values.iter().all(|&x| (x - initial_raw()).abs() < 1e-12));
    }

    #[test]
    fn resolution_below_eight_rejected() {
        let g = GridField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        assert!(bake_volume(&g, &Aabb::cube(1.0), 7).is_err());
    }

    #[test]
    fn cardinality_at_128() {
        let v = ScalarVolume::from_fn(128, Aabb::cube(1.0), |_| 0.0).unwrap();
        assert_eq!(v.values.len(), 2_097_152);
    }

    #[test]
    fn baking_grid_at_own_lattice_is_exact() {
        let g = GridField::from_fn([9, 9, 9], Aabb::cube(1.5), |p| p.x * 3.0 - p.y * p.z + 0.1)
            .unwrap();
        let v = bake_volume(&g, g.bounds(), 9).unwrap();
        assert_eq!(v.values, g.values());
    }

    #[test]
    fn outside_support_uses_empty_raw() {
        let g = GridField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        let v = bake_volume(&g, &Aabb::cube(2.0), 8).unwrap();
        assert_eq!(v.value(0, 0, 0), EMPTY_RAW);
    }

    #[test]
    fn crop_excludes_ground_band() {
        let c = Crop {
            bounds: Aabb::cube(1.0),
            ground: Some(0.0),
            margin: 0.05,
        };
        assert!(!c.contains(&Vec3::new(0.0, 0.0, 0.02)));
        assert!(c.contains(&Vec3::new(0.0, 0.0, 0.2)));
        assert!(!c.contains(&Vec3::new(2.0, 0.0, 0.2)));
    }
}
