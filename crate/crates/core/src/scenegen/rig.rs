use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Aabb, Camera};
use crate::Vec3;

/// Placement of cameras, light and reconstruction volume around a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    /// Distance of every camera from `target`.
    pub camera_radius: f64,
    /// Half of the horizontal field of view, in degrees.
    pub camera_half_fov_deg: f64,
    /// Camera elevation band `[lo, hi]` above the horizon, in degrees.
    pub elevation_deg: [f64; 2],
    /// Point every camera and the light look at.
    pub target: [f64; 3],
    /// Light distance as a multiple of the scene radius.
    pub light_distance_factor: f64,
    pub light_elevation_deg: f64,
    pub light_azimuth_deg: f64,
    /// Shadow map size stored with the dataset and used for training.
    pub light_size: usize,
    /// Shadow map size used to render the ground-truth masks.
    pub gt_light_size: usize,
    /// Depth bias of the ground-truth shadow test, in world units.
    pub gt_bias: f64,
    /// Volume the field is fitted in; it must contain the objects and the
    /// ground under their shadows.
    pub field_bounds: Aabb,
    /// The ground is a platform this far inside the field bounds, so that
    /// ground truth and field share the same finite support.
    pub platform_inset: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            camera_radius: 4.0,
            camera_half_fov_deg: 18.0,
            elevation_deg: [35.0, 85.0],
            target: [0.0, 0.0, 0.0],
            light_distance_factor: 10.0,
            light_elevation_deg: 55.0,
            light_azimuth_deg: 30.0,
            light_size: 128,
            gt_light_size: 512,
            gt_bias: 0.015,
            field_bounds: Aabb {
                min: Vec3::new(-1.4, -1.4, -0.2),
                max: Vec3::new(1.4, 1.4, 1.2),
            },
            platform_inset: 0.05,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.camera_radius > 0.0) {
            return Err(invalid("camera radius must be positive"));
        }
        if !(self.camera_half_fov_deg > 0.0 && self.camera_half_fov_deg < 89.0) {
            return Err(invalid(
                "camera half field of view must lie in (0, 89) degrees",
            ));
        }
        let [lo, hi] = self.elevation_deg;
        if !(0.0 <= lo && lo <= hi && hi <= 90.0) {
            return Err(invalid(format!(
                "elevation band must satisfy 0 <= lo <= hi <= 90, got [{lo}, {hi}]"
            )));
        }
        if !(self.light_distance_factor > 1.0) {
            return Err(invalid("light distance factor must exceed 1"));
        }
        if self.light_size == 0 || self.gt_light_size == 0 {
            return Err(invalid("shadow map sizes must be positive"));
        }
        if !(self.gt_bias >= 0.0) {
            return Err(invalid("ground-truth bias must be nonnegative"));
        }
        Aabb::new(self.field_bounds.min, self.field_bounds.max)?;
        if !(self.platform_inset >= 0.0) {
            return Err(invalid("platform inset must be nonnegative"));
        }
        Ok(())
    }

    /// Ground platform under a plane at height `ground`.
    pub fn platform(&self, ground: f64) -> Result<Aabb> {
        let b = &self.field_bounds;
        let d = self.platform_inset;
        let min = b.min.add_scalar(d);
        if !(min.z < ground) {
            return Err(invalid(format!(
                "field bounds must reach below the ground at {ground}"
            )));
        }
        Aabb::new(
            min,
            Vec3::new(b.max.x - d, b.max.y - d, ground.max(min.z) + 1.0),
        )
    }

    pub fn target(&self) -> Vec3 {
        Vec3::from(self.target)
    }

    pub fn camera_focal(&self, width: usize) -> f64 {
        width as f64 / 2.0 / self.camera_half_fov_deg.to_radians().tan()
    }
}

/// Radius of the sphere around `target` that encloses the objects; one unit
/// for scenes without objects.
pub fn scene_radius(object_bounds: Option<&Aabb>, target: &Vec3) -> f64 {
    object_bounds.map_or(1.0, |b| {
        b.corners()
            .iter()
            .map(|c| (c - target).norm())
            .fold(0.0, f64::max)
    })
}

/// Near and far planes that bracket `bounds` as seen from `eye`.
pub fn camera_near_far(eye: &Vec3, bounds: &Aabb) -> (f64, f64) {
    let closest = eye.sup(&bounds.min).inf(&bounds.max);
    let far = bounds
        .corners()
        .iter()
        .map(|c| (c - eye).norm())
        .fold(0.0, f64::max)
        * 1.001;
    let near = ((closest - eye).norm() * 0.999).max(far * 1e-3);
    (near, far)
}

fn up_for(dir: &Vec3) -> Vec3 {
    if dir.normalize().z.abs() > 0.999 {
        Vec3::y()
    } else {
        Vec3::z()
    }
}

/// Square perspective light looking at the target from
/// `light_distance_factor × radius`, with a field of view that covers the
/// whole field volume.
pub fn light_camera(rig: &RigConfig, radius: f64, size: usize) -> Result<Camera> {
    rig.validate()?;
    let target = rig.target();
    let (el, az) = (
        rig.light_elevation_deg.to_radians(),
        rig.light_azimuth_deg.to_radians(),
    );
    let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    let distance = rig.light_distance_factor * radius;
    let eye = target + dir * distance;
    let cover = rig
        .field_bounds
        .corners()
        .iter()
        .map(|c| (c - target).norm())
        .fold(0.0, f64::max);
    if cover >= distance {
        return Err(invalid(format!(
            "light at distance {distance} lies inside the field volume (radius {cover})"
        )));
    }
    let half_fov = (cover / distance).asin();
    let focal = size as f64 / 2.0 / half_fov.tan();
    let near = distance - cover;
    let far = distance + cover;
    Camera::look_at(size, size, focal, eye, target, up_for(&dir), near, far)
}

/// `n` cameras on the sphere of radius `camera_radius` around the target,
/// uniform by area within the elevation band, each looking at the target.
pub fn sample_hemisphere_poses(
    n: usize,
    rig: &RigConfig,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(invalid("need at least one pose"));
    }
    rig.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rig.target();
    let [lo, hi] = rig.elevation_deg.map(|e| e.to_radians().sin());
    let focal = rig.camera_focal(width);
    (0..n)
        .map(|_| {
            let z: f64 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let dir = Vec3::new(r * az.cos(), r * az.sin(), z);
            let eye = target + dir * rig.camera_radius;
            let (near, far) = camera_near_far(&eye, &rig.field_bounds);
            Camera::look_at(width, height, focal, eye, target, up_for(&dir), near, far)
        })
        .collect()
}
