use rayon::prelude::*;

use super::GtScene;
use crate::error::Result;
use crate::geometry::Camera;
use crate::map::Map2;
use crate::Vec3;

/// Offset along the light direction before the exact occlusion ray cast, so
/// that a lit surface does not occlude itself.
const ORACLE_OFFSET: f64 = 1e-4;

/// Cap on the slope term of the shadow-map bias, reached about 6 degrees
/// from grazing incidence.
const MAX_SLOPE: f64 = 10.0;

/// Classical shadow map: the light's z-buffer, infinite where its rays miss.
#[derive(Debug, Clone)]
pub struct GtShadowMap {
    pub light: Camera,
    pub zbuffer: Map2<f64>,
    pub bias: f64,
}

/// Z-buffer of `camera` by ray casting; `None` where the ray misses within
/// the far plane.
fn cast_zbuffer(scene: &dyn GtScene, camera: &Camera) -> Vec<Option<(Vec3, f64)>> {
    camera
        .pixel_grid()
        .into_par_iter()
        .map(|(x, y)| {
            let ray = camera.ray(x, y);
            scene
                .raycast(&ray.origin, &ray.direction, camera.far)
                .map(|t| {
                    let p = ray.at(t);
                    (p, -camera.world_to_camera(&p).z)
                })
        })
        .collect()
}

impl GtShadowMap {
    pub fn render(scene: &dyn GtScene, light: &Camera, bias: f64) -> Result<Self> {
        light.validate()?;
        let data = cast_zbuffer(scene, light)
            .into_iter()
            .map(|h| h.map_or(f64::INFINITY, |(_, z)| z))
            .collect();
        Ok(Self {
            light: light.clone(),
            zbuffer: Map2::from_vec(light.width, light.height, data)?,
            bias,
        })
    }

    /// Nearest-texel depth test. Points outside the light's view or behind
    /// a texel whose ray missed everything are lit. With a surface normal,
    /// surfaces facing away from the light are shadowed and the bias grows
    /// with the slope of the surface as seen from the light.
    pub fn in_shadow(&self, x: &Vec3, normal: Option<&Vec3>) -> bool {
        let Some((px, py, z)) = self.light.project(x) else {
            return false;
        };
        let mut bias = self.bias;
        if let Some(n) = normal {
            let cos = n.dot(&(self.light.center() - x).normalize());
            if cos <= 0.0 {
                return true;
            }
            let tan = ((1.0 - cos * cos).max(0.0).sqrt() / cos).min(MAX_SLOPE);
            bias += tan * z / self.light.focal;
        }
        let (ix, iy) = (px.round(), py.round());
        if ix < 0.0 || iy < 0.0 || ix >= self.light.width as f64 || iy >= self.light.height as f64 {
            return false;
        }
        let stored = *self.zbuffer.get(ix as usize, iy as usize);
        z > stored + bias
    }
}

/// Exact visibility: whether anything blocks the segment from `x` to the
/// light center.
pub fn occluded(scene: &dyn GtScene, x: &Vec3, light_center: &Vec3) -> bool {
    let to_light = light_center - x;
    let dist = to_light.norm();
    let dir = to_light / dist;
    let start = x + dir * ORACLE_OFFSET;
    scene.raycast(&start, &dir, dist - ORACLE_OFFSET).is_some()
}

/// Ground-truth mask and z-buffer of one camera. Pixels that see nothing
/// have depth 0 and are never shadowed.
#[derive(Debug, Clone, PartialEq)]
pub struct GtView {
    pub mask: Map2<f64>,
    pub zbuffer: Map2<f64>,
}

fn view_from_hits(
    camera: &Camera,
    hits: Vec<Option<(Vec3, f64)>>,
    shadowed: impl Fn(&Vec3) -> bool + Sync,
) -> Result<GtView> {
    let (mask, depth): (Vec<f64>, Vec<f64>) = hits
        .into_par_iter()
        .map(|h| match h {
            Some((p, z)) => (if shadowed(&p) { 1.0 } else { 0.0 }, z),
            None => (0.0, 0.0),
        })
        .unzip();
    Ok(GtView {
        mask: Map2::from_vec(camera.width, camera.height, mask)?,
        zbuffer: Map2::from_vec(camera.width, camera.height, depth)?,
    })
}

pub fn render_gt_view(
    scene: &dyn GtScene,
    camera: &Camera,
    shadow_map: &GtShadowMap,
) -> Result<GtView> {
    camera.validate()?;
    view_from_hits(camera, cast_zbuffer(scene, camera), |p| {
        shadow_map.in_shadow(p, scene.normal(p).as_ref())
    })
}

pub fn render_gt_masks(
    scene: &dyn GtScene,
    cameras: &[Camera],
    shadow_map: &GtShadowMap,
) -> Result<Vec<GtView>> {
    cameras
        .iter()
        .map(|c| render_gt_view(scene, c, shadow_map))
        .collect()
}

/// Mask from a direct occlusion ray cast per pixel instead of a shadow map.
pub fn render_oracle_mask(
    scene: &dyn GtScene,
    camera: &Camera,
    light_center: &Vec3,
) -> Result<Map2<f64>> {
    camera.validate()?;
    Ok(view_from_hits(camera, cast_zbuffer(scene, camera), |p| {
        occluded(scene, p, light_center)
    })?
    .mask)
}

#[cfg(test)]
mod tests {
    use super::super::{
        builtin_scene, light_camera, sample_hemisphere_poses, scene_radius, RigConfig,
        BUILTIN_SCENES,
    };
    use super::*;

    fn agreement(a: &Map2<f64>, b: &Map2<f64>) -> f64 {
        a.data.iter().zip(&b.data).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }

    #[test]
    fn empty_scene_has_no_shadow() {
        let scene = builtin_scene("empty").unwrap();
        let rig = RigConfig {
            light_elevation_deg: 90.0,
            ..Default::default()
        };
        let light = light_camera(&rig, 1.0, 128).unwrap();
        let sm = GtShadowMap::render(&scene, &light, rig.gt_bias).unwrap();
        let cams = sample_hemisphere_poses(4, &rig, 32, 32, 1).unwrap();
        for v in render_gt_masks(&scene, &cams, &sm).unwrap() {
            assert!(v.mask.data.iter().all(|&m| m == 0.0));
            assert!(v.zbuffer.data.iter().any(|&z| z > 0.0));
        }
    }

    #[test]
    fn sphere_shadow_area_under_zenith_light() {
        let scene = builtin_scene("sphere").unwrap();
        let r = 0.3;
        // A distant light approximates parallel rays, whose shadow is a disc
        // of the sphere's radius.
        let rig = RigConfig {
            light_elevation_deg: 90.0,
            light_distance_factor: 400.0,
            ..Default::default()
        };
        let light = light_camera(&rig, 1.0, 1024).unwrap();
        let sm = GtShadowMap::render(&scene, &light, 1e-3).unwrap();
        let n = 256;
        let half = 0.5;
        let cell = 2.0 * half / n as f64;
        let mut shadow = 0usize;
        let mut oracle = 0usize;
        for j in 0..n {
            for i in 0..n {
                let p = Vec3::new(
                    -half + (i as f64 + 0.5) * cell,
                    -half + (j as f64 + 0.5) * cell,
                    0.0,
                );
                shadow += sm.in_shadow(&p, Some(&Vec3::z())) as usize;
                oracle += occluded(&scene, &p, &light.center()) as usize;
            }
        }
        let disc = std::f64::consts::PI * r * r;
        let area = shadow as f64 * cell * cell;
        let oracle_area = oracle as f64 * cell * cell;
        assert!((area - disc).abs() / disc < 0.05, "area {area} vs {disc}");
        assert!(
            (oracle_area - disc).abs() / disc < 0.05,
            "oracle area {oracle_area} vs {disc}"
        );
    }

    #[test]
    fn shadow_map_agrees_with_exact_occlusion() {
        let rig = RigConfig::default();
        for name in BUILTIN_SCENES {
            let scene = builtin_scene(name).unwrap();
            let radius = scene_radius(scene.object_bounds().as_ref(), &rig.target());
            let light = light_camera(&rig, radius, rig.gt_light_size).unwrap();
            let sm = GtShadowMap::render(&scene, &light, rig.gt_bias).unwrap();
            for cam in sample_hemisphere_poses(3, &rig, 64, 64, 5).unwrap() {
                let gt = render_gt_view(&scene, &cam, &sm).unwrap();
                let exact = render_oracle_mask(&scene, &cam, &light.center()).unwrap();
                let a = agreement(&gt.mask, &exact);
                assert!(a >= 0.995, "{name}: agreement {a}");
            }
        }
    }

    #[test]
    fn gt_rendering_is_deterministic() {
        let rig = RigConfig::default();
        let scene = builtin_scene("chair").unwrap();
        let light = light_camera(&rig, 1.0, 128).unwrap();
        let sm = GtShadowMap::render(&scene, &light, rig.gt_bias).unwrap();
        let cams = sample_hemisphere_poses(2, &rig, 24, 24, 2).unwrap();
        assert_eq!(
            render_gt_masks(&scene, &cams, &sm).unwrap(),
            render_gt_masks(&scene, &cams, &sm).unwrap()
        );
    }
}
