//! Synthetic ground truth: analytic and mesh scenes, camera rigs, classical
//! shadow mapping for ground-truth masks and dataset files.

mod dataset;
mod masks;
mod mesh_scene;
mod rig;
mod sdf;

pub use dataset::{
    generate_dataset, load_dataset, load_views, resolve_scene, Dataset, DatasetManifest, GenConfig,
    SceneSource, ViewEntry,
};
pub use masks::{
    occluded, render_gt_masks, render_gt_view, render_oracle_mask, GtShadowMap, GtView,
};
pub use mesh_scene::{normalize_mesh, ray_triangle, Bvh};
pub use rig::{camera_near_far, light_camera, sample_hemisphere_poses, scene_radius, RigConfig};
pub use sdf::{
    builtin_scene, ground_solid, raycast_depth, sphere_trace, GroundSolid, SdfScene, Shape,
    BUILTIN_SCENES,
};

use crate::error::Result;
use crate::field::GridField;
use crate::geometry::Aabb;
use crate::recon::{marching_cubes, ScalarVolume, TriangleMesh};
use crate::Vec3;

/// Ground-truth geometry that can be ray cast and queried for occupancy.
pub trait GtScene: Send + Sync {
    fn name(&self) -> &str;

    /// First surface hit (objects or ground) within `(0, far]` along a unit
    /// direction.
    fn raycast(&self, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64>;

    /// Signed distance to the full scene, when the scene has one.
    fn signed_distance(&self, x: &Vec3) -> Option<f64>;

    /// Whether `x` lies inside solid geometry (objects or below the ground).
    fn occupied(&self, x: &Vec3) -> bool;

    /// Outward unit surface normal near `x`, from the gradient of the signed
    /// distance when there is one.
    fn normal(&self, x: &Vec3) -> Option<Vec3> {
        const H: f64 = 1e-6;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = H;
            g[a] = self.signed_distance(&(x + e))? - self.signed_distance(&(x - e))?;
        }
        let n = g.norm();
        (n > 0.0).then(|| g / n)
    }

    fn object_bounds(&self) -> Option<Aabb>;

    fn ground(&self) -> Option<f64>;

    /// Object surface (ground excluded) as a triangle mesh.
    fn object_mesh(&self, resolution: usize) -> Result<TriangleMesh>;

    /// Copy of the scene with the ground clipped to `platform`.
    fn with_platform(&self, platform: Aabb) -> Box<dyn GtScene>;
}

impl GtScene for SdfScene {
    fn name(&self) -> &str {
        &self.name
    }

    fn raycast(&self, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
        raycast_depth(self, origin, dir, far)
    }

    fn signed_distance(&self, x: &Vec3) -> Option<f64> {
        Some(self.distance(x))
    }

    fn occupied(&self, x: &Vec3) -> bool {
        self.distance(x) < 0.0
    }

    fn object_bounds(&self) -> Option<Aabb> {
        SdfScene::object_bounds(self)
    }

    fn ground(&self) -> Option<f64> {
        self.ground
    }

    /// Marching cubes on the object distance over slightly padded bounds.
    fn object_mesh(&self, resolution: usize) -> Result<TriangleMesh> {
        let Some(b) = SdfScene::object_bounds(self) else {
            return Ok(TriangleMesh::default());
        };
        let pad = b.extent().max() * 2.0 / resolution as f64 + 1e-3;
        let lo = b.min.add_scalar(-pad);
        let hi = b.max.add_scalar(pad);
        // Cubic cells keep the lattice isotropic.
        let half = (hi - lo).max() / 2.0;
        let c = (lo + hi) / 2.0;
        let bounds = Aabb::new(c.add_scalar(-half), c.add_scalar(half))?;
        let volume = ScalarVolume::from_fn(resolution, bounds, |x| self.object_distance(x))?;
        Ok(marching_cubes(&volume, 0.0))
    }

    fn with_platform(&self, platform: Aabb) -> Box<dyn GtScene> {
        Box::new(SdfScene {
            platform: Some(platform),
            ..self.clone()
        })
    }
}

/// Imported triangle mesh over an optional ground plane.
#[derive(Debug, Clone)]
pub struct MeshScene {
    pub name: String,
    bvh: Bvh,
    pub ground: Option<f64>,
    pub platform: Option<Aabb>,
}

impl MeshScene {
    pub fn new(name: impl Into<String>, mesh: TriangleMesh, ground: Option<f64>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            bvh: Bvh::new(mesh)?,
            ground,
            platform: None,
        })
    }

    pub fn mesh(&self) -> &TriangleMesh {
        self.bvh.mesh()
    }
}

impl GtScene for MeshScene {
    fn name(&self) -> &str {
        &self.name
    }

    fn raycast(&self, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
        let hit =
            ground_solid(self.ground, self.platform.as_ref()).and_then(|g| g.hit(origin, dir, far));
        self.bvh.raycast(origin, dir, hit.unwrap_or(far)).or(hit)
    }

    fn signed_distance(&self, _x: &Vec3) -> Option<f64> {
        None
    }

    fn occupied(&self, x: &Vec3) -> bool {
        ground_solid(self.ground, self.platform.as_ref()).is_some_and(|g| g.contains(x))
            || self.bvh.inside(x)
    }

    fn object_bounds(&self) -> Option<Aabb> {
        Some(self.bvh.bounds())
    }

    fn ground(&self) -> Option<f64> {
        self.ground
    }

    fn object_mesh(&self, _resolution: usize) -> Result<TriangleMesh> {
        Ok(self.bvh.mesh().clone())
    }

    fn with_platform(&self, platform: Aabb) -> Box<dyn GtScene> {
        Box::new(MeshScene {
            platform: Some(platform),
            ..self.clone()
        })
    }
}

/// Largest raw value written by [`bake_scene_field`]. The density climbs to
/// this within one cell, so rays stop a small fraction of a cell inside
/// the surface; `softplus(-BAKE_CLAMP)` is zero.
pub const BAKE_CLAMP: f64 = 20000.0;

/// Grid whose opacity is high inside the scene and zero outside. With a
/// signed distance the raw value is `-k·sdf`, clamped, with `k` chosen so
/// that one grid cell spans the clamp range; this keeps the interpolated
/// zero crossing on the true surface. Mesh scenes fall back to a clamped
/// occupancy indicator.
pub fn bake_scene_field(
    scene: &dyn GtScene,
    resolution: [usize; 3],
    bounds: Aabb,
) -> Result<GridField> {
    let probe = GridField::filled(resolution, bounds, 0.0)?;
    let spacing = probe.spacing();
    let k = BAKE_CLAMP / spacing.min();
    GridField::from_fn(resolution, bounds, |x| match scene.signed_distance(x) {
        Some(d) => (-k * d).clamp(-BAKE_CLAMP, BAKE_CLAMP),
        None if scene.occupied(x) => BAKE_CLAMP,
        None => -BAKE_CLAMP,
    })
}
