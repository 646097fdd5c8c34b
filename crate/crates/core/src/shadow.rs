//! Differentiable shadow mapping.
//!
//! Render expected ranges from the camera and the light, convert both to
//! z-buffers, project every camera pixel into the light, index the light's
//! z-buffer (the shadow map) there and compare depths softly.
//!
//! Gradients flow through all depths (camera and light) down to the field
//! parameters. Projected pixel coordinates are treated as constants.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{sigmoid, GradientBuffer, OpacityField};
use crate::geometry::{Camera, ProjectedPixel, Projection};
use crate::map::Map2;
use crate::renderer::{backprop_rays, render_range_map, trace_image, RenderSettings, TracedRay};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub use_sigmoid: bool,
    /// Depth bias in light depth units; `None` means `1e-3·(far − near)` of
    /// the light.
    pub bias: Option<f64>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            epsilon: 0.0,
            mu_min: 0.0,
            mu_max: 1.0,
            use_sigmoid: false,
            bias: None,
        }
    }
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.mu_min < self.mu_max) {
            return Err(invalid("need mu_min < mu_max"));
        }
        if let Some(b) = self.bias {
            if !(b >= 0.0) {
                return Err(invalid(format!("bias must be nonnegative, got {b}")));
            }
        }
        Ok(())
    }

    pub fn resolved_bias(&self, light: &Camera) -> f64 {
        self.bias.unwrap_or(1e-3 * (light.far - light.near))
    }

    #[inline]
    fn binary(&self, delta: f64) -> f64 {
        (delta / self.beta).max(self.epsilon).clamp(0.0, 1.0)
    }

    #[inline]
    fn binary_grad(&self, delta: f64) -> f64 {
        let x = delta / self.beta;
        if x > self.epsilon && x > 0.0 && x < 1.0 {
            1.0 / self.beta
        } else {
            0.0
        }
    }
}

/// Which predicted mask a loss is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Binary,
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPrediction {
    pub binary: Map2<f64>,
    pub smooth: Map2<f64>,
    /// Biased depth difference `Ẑˡ_cam − Ẑ_light[u′, v′] − b`.
    pub delta: Map2<f64>,
    pub valid: Map2<bool>,
    /// Min-max normalization had zero range; `smooth` is all zero.
    pub degenerate: bool,
}

impl ShadowPrediction {
    pub fn mask(&self, variant: MaskVariant) -> &Map2<f64> {
        match variant {
            MaskVariant::Binary => &self.binary,
            MaskVariant::Smooth => &self.smooth,
        }
    }
}

// Coordinates this close to a texel center read it exactly, so a pixel
// projected onto itself is unaffected by rounding in the projection.
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Shadow-map lookup with bilinear interpolation at clamped coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowLookup {
    pub value: f64,
    pub index: [usize; 4],
    pub weight: [f64; 4],
    /// False when every contributing texel is empty.
    pub hit: bool,
}

/// Bilinear lookup that ignores empty texels (depth at or below
/// `min_depth`, whose light rays saw nothing) and renormalizes the weights
/// of the rest, so an empty texel acts as infinitely deep instead of
/// dragging the interpolated depth towards zero.
pub fn index_shadow_map(shadow_map: &Map2<f64>, u: f64, v: f64, min_depth: f64) -> ShadowLookup {
    let (w, h) = (shadow_map.width, shadow_map.height);
    let u = snap(u.clamp(0.0, (w - 1) as f64));
    let v = snap(v.clamp(0.0, (h - 1) as f64));
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let index = [
        shadow_map.index(x0, y0),
        shadow_map.index(x1, y0),
        shadow_map.index(x0, y1),
        shadow_map.index(x1, y1),
    ];
    let mut weight = [
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    ];
    let mut total = 0.0;
    for (w, &i) in weight.iter_mut().zip(&index) {
        if shadow_map.data[i] > min_depth {
            total += *w;
        } else {
            *w = 0.0;
        }
    }
    if !(total > 0.0) {
        return ShadowLookup {
            value: 0.0,
            index,
            weight: [0.0; 4],
            hit: false,
        };
    }
    if total < 1.0 {
        for w in &mut weight {
            *w /= total;
        }
    }
    let value = index
        .iter()
        .zip(&weight)
        .map(|(&i, &w)| shadow_map.data[i] * w)
        .sum();
    ShadowLookup {
        value,
        index,
        weight,
        hit: true,
    }
}

/// Soft depth comparison producing both mask variants.
///
/// `projected_depth` is the camera z-buffer carried into the light frame and
/// `indexed_depth` the shadow map sampled at the projected pixels.
pub fn soft_compare(
    projected_depth: &Map2<f64>,
    indexed_depth: &Map2<f64>,
    valid: &Map2<bool>,
    bias: f64,
    cfg: &ComparisonConfig,
) -> Result<ShadowPrediction> {
    projected_depth.check_shape(indexed_depth)?;
    projected_depth.check_shape(valid)?;
    cfg.validate()?;
    let delta = Map2 {
        width: projected_depth.width,
        height: projected_depth.height,
        data: projected_depth
            .data
            .iter()
            .zip(&indexed_depth.data)
            .map(|(z, s)| z - s - bias)
            .collect(),
    };
    let binary = Map2 {
        width: delta.width,
        height: delta.height,
        data: delta
            .data
            .iter()
            .zip(&valid.data)
            .map(|(&d, &ok)| if ok { cfg.binary(d) } else { 0.0 })
            .collect(),
    };
    let norm = Normalization::compute(&delta.data, &valid.data);
    if norm.is_none() {
        warn!("shadow normalization is degenerate (max = min); smooth mask set to zero");
    }
    let smooth = Map2 {
        width: delta.width,
        height: delta.height,
        data: delta
            .data
            .iter()
            .zip(&valid.data)
            .map(|(&d, &ok)| match (&norm, ok) {
                (Some(n), true) => n.apply(d, cfg),
                _ => 0.0,
            })
            .collect(),
    };
    Ok(ShadowPrediction {
        binary,
        smooth,
        delta,
        valid: valid.clone(),
        degenerate: norm.is_none(),
    })
}

/// Per-image min-max of `max(Δ, 0)` over valid pixels.
#[derive(Debug, Clone, Copy)]
struct Normalization {
    min: f64,
    max: f64,
    argmin: usize,
    argmax: usize,
}

impl Normalization {
    fn compute(delta: &[f64], valid: &[bool]) -> Option<Self> {
        let mut n = Normalization {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            argmin: 0,
            argmax: 0,
        };
        for (i, (&d, &ok)) in delta.iter().zip(valid).enumerate() {
            if !ok {
                continue;
            }
            let p = d.max(0.0);
            if p < n.min {
                n.min = p;
                n.argmin = i;
            }
            if p > n.max {
                n.max = p;
                n.argmax = i;
            }
        }
        (n.max > n.min).then_some(n)
    }

    #[inline]
    fn unit(&self, d: f64) -> f64 {
        (d.max(0.0) - self.min) / (self.max - self.min)
    }

    #[inline]
    fn apply(&self, d: f64, cfg: &ComparisonConfig) -> f64 {
        let y = cfg.mu_min + (cfg.mu_max - cfg.mu_min) * self.unit(d);
        if cfg.use_sigmoid {
            sigmoid(y)
        } else {
            y
        }
    }
}

/// Pull a mask gradient back to `∂L/∂Δ`.
fn mask_to_delta_grad(
    pred: &ShadowPrediction,
    d_mask: &[f64],
    variant: MaskVariant,
    cfg: &ComparisonConfig,
) -> Vec<f64> {
    let delta = &pred.delta.data;
    let valid = &pred.valid.data;
    let mut out = vec![0.0; delta.len()];
    match variant {
        MaskVariant::Binary => {
            for i in 0..delta.len() {
                if valid[i] {
                    out[i] = d_mask[i] * cfg.binary_grad(delta[i]);
                }
            }
        }
        MaskVariant::Smooth => {
            let Some(n) = Normalization::compute(delta, valid) else {
                return out;
            };
            let s = cfg.mu_max - cfg.mu_min;
            let r = n.max - n.min;
            let mut d_min = 0.0;
            let mut d_max = 0.0;
            let mut d_pos = vec![0.0; delta.len()];
            for i in 0..delta.len() {
                if !valid[i] {
                    continue;
                }
                let mut g = d_mask[i];
                if cfg.use_sigmoid {
                    let m = pred.smooth.data[i];
                    g *= m * (1.0 - m);
                }
                let p = delta[i].max(0.0);
                d_pos[i] += g * s / r;
                d_min += g * s * (p - n.max) / (r * r);
                d_max -= g * s * (p - n.min) / (r * r);
            }
            d_pos[n.argmin] += d_min;
            d_pos[n.argmax] += d_max;
            for i in 0..delta.len() {
                if delta[i] > 0.0 {
                    out[i] = d_pos[i];
                }
            }
        }
    }
    out
}

/// Rendered z-buffer with the traced rays retained for backpropagation.
#[derive(Debug, Clone)]
pub struct DepthPass {
    pub camera: Camera,
    pub rays: Vec<TracedRay>,
    pub zbuffer: Map2<f64>,
}

impl DepthPass {
    pub fn render<F: OpacityField + ?Sized>(
        field: &F,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<Self> {
        let rays = trace_image(field, camera, settings)?;
        let data = rays
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                let (x, y) = (i % camera.width, i / camera.width);
                tr.range / camera.range_scale(x as f64, y as f64)
            })
            .collect();
        Ok(Self {
            camera: camera.clone(),
            zbuffer: Map2::from_vec(camera.width, camera.height, data)?,
            rays,
        })
    }

    /// Forward-only pass: same z-buffer, no per-ray samples kept, so its
    /// memory does not grow with the sample count. It has no backward pass.
    pub fn render_detached<F: OpacityField + ?Sized>(
        field: &F,
        camera: &Camera,
        settings: &RenderSettings,
    ) -> Result<Self> {
        let mut zbuffer = render_range_map(field, camera, settings)?;
        for (i, z) in zbuffer.data.iter_mut().enumerate() {
            let (x, y) = (i % camera.width, i / camera.width);
            *z /= camera.range_scale(x as f64, y as f64);
        }
        Ok(Self {
            camera: camera.clone(),
            rays: Vec::new(),
            zbuffer,
        })
    }

    pub fn is_detached(&self) -> bool {
        self.rays.is_empty()
    }

    /// Convert `∂L/∂ẑ` into `∂L/∂D̂` for every ray.
    fn range_grad(&self, dz: &[f64]) -> Vec<f64> {
        dz.iter()
            .enumerate()
            .map(|(i, &g)| {
                let (x, y) = (i % self.camera.width, i / self.camera.width);
                g / self.camera.range_scale(x as f64, y as f64)
            })
            .collect()
    }

    /// Backpropagate `∂L/∂ẑ` for every pixel into field parameters. Rays are
    /// split into fixed chunks of `chunk_rays`; per-chunk buffers are merged
    /// in chunk order so the result does not depend on the thread count.
    pub fn backward<F: OpacityField + ?Sized>(
        &self,
        field: &F,
        dz: &[f64],
        chunk_rays: usize,
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        if self.is_detached() {
            return Err(invalid("a detached depth pass has no backward pass"));
        }
        if dz.len() != self.rays.len() {
            return Err(crate::error::mismatch(self.rays.len(), dz.len()));
        }
        let d_range = self.range_grad(dz);
        let chunk = chunk_rays.max(1);
        let jobs: Vec<(&[TracedRay], &[f64])> =
            self.rays.chunks(chunk).zip(d_range.chunks(chunk)).collect();
        backprop_chunks(field, &jobs, grads)
    }
}

pub fn estimate_zbuffers<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    light: &Camera,
    settings: &RenderSettings,
) -> Result<(Map2<f64>, Map2<f64>)> {
    let cam = DepthPass::render(field, camera, settings)?;
    let lit = render_shadow_map(field, light, settings)?;
    Ok((cam.zbuffer, lit.zbuffer))
}

/// Pixels and shadow-map texels whose expected depth is below this fraction
/// of the near plane saw (almost) nothing: their rays are nearly
/// transparent.
pub const MIN_COVERAGE: f64 = 1e-3;

const LIGHT_STREAM: u64 = 0x6c69_6768_7400_0000;

/// Full forward state of one camera/light pair, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ShadowForward<'a> {
    pub camera: DepthPass,
    pub light: &'a DepthPass,
    pub projected: Vec<ProjectedPixel>,
    pub lookups: Vec<ShadowLookup>,
    pub bias: f64,
    pub prediction: ShadowPrediction,
}

/// Render the shadow map once; it can be shared by any number of cameras.
pub fn render_shadow_map<F: OpacityField + ?Sized>(
    field: &F,
    light: &Camera,
    settings: &RenderSettings,
) -> Result<DepthPass> {
    let light_settings = RenderSettings {
        seed: settings.seed ^ LIGHT_STREAM,
        ..*settings
    };
    DepthPass::render(field, light, &light_settings)
}

/// Projected light-frame pixel coordinates used in place of the ones the
/// forward pass would compute. Finite-difference checks of the
/// coordinate-frozen gradient need this.
pub type FrozenCoords<'a> = Option<&'a [(f64, f64)]>;

pub fn shadow_forward<'a, F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    shadow_map: &'a DepthPass,
    cfg: &ComparisonConfig,
    settings: &RenderSettings,
    frozen: FrozenCoords<'_>,
) -> Result<ShadowForward<'a>> {
    let cam = DepthPass::render(field, camera, settings)?;
    compare_passes(cam, shadow_map, cfg, frozen)
}

pub fn compare_passes<'a>(
    cam: DepthPass,
    light: &'a DepthPass,
    cfg: &ComparisonConfig,
    frozen: FrozenCoords<'_>,
) -> Result<ShadowForward<'a>> {
    let camera = &cam.camera;
    let proj = Projection::between(camera, &light.camera)?;
    let (lw, lh) = (light.camera.width, light.camera.height);
    let n = camera.num_pixels();
    let min_depth = MIN_COVERAGE * camera.near;
    if let Some(f) = frozen {
        if f.len() != n {
            return Err(crate::error::mismatch(n, f.len()));
        }
    }
    let mut projected: Vec<ProjectedPixel> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % camera.width) as f64, (i / camera.width) as f64);
            let z = cam.zbuffer.data[i];
            let mut p = proj.project_clamped(x, y, z, lw, lh);
            // A pixel whose ray saw (almost) nothing has no surface to shadow.
            p.valid &= z > min_depth;
            if let Some(f) = frozen {
                p.u = f[i].0;
                p.v = f[i].1;
            }
            p
        })
        .collect();
    let light_min = MIN_COVERAGE * light.camera.near;
    let lookups: Vec<ShadowLookup> = projected
        .iter()
        .map(|p| index_shadow_map(&light.zbuffer, p.u, p.v, light_min))
        .collect();
    for (p, l) in projected.iter_mut().zip(&lookups) {
        p.valid &= l.hit;
    }
    let (w, h) = (camera.width, camera.height);
    let projected_depth = Map2::from_vec(w, h, projected.iter().map(|p| p.depth).collect())?;
    let indexed = Map2::from_vec(w, h, lookups.iter().map(|l| l.value).collect())?;
    let valid = Map2::from_vec(w, h, projected.iter().map(|p| p.valid).collect())?;
    let bias = cfg.resolved_bias(&light.camera);
    let prediction = soft_compare(&projected_depth, &indexed, &valid, bias, cfg)?;
    Ok(ShadowForward {
        camera: cam,
        light,
        projected,
        lookups,
        bias,
        prediction,
    })
}

impl ShadowForward<'_> {
    pub fn frozen_coords(&self) -> Vec<(f64, f64)> {
        self.projected.iter().map(|p| (p.u, p.v)).collect()
    }

    /// Depth gradients `(∂L/∂ẑ_cam, ∂L/∂ẑ_light)` for a mask gradient.
    pub fn depth_grads(
        &self,
        d_mask: &Map2<f64>,
        variant: MaskVariant,
        cfg: &ComparisonConfig,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.prediction.delta.check_shape(d_mask)?;
        let d_delta = mask_to_delta_grad(&self.prediction, &d_mask.data, variant, cfg);
        let mut dz_cam = vec![0.0; d_delta.len()];
        let mut dz_light = vec![0.0; self.light.zbuffer.len()];
        for (i, &g) in d_delta.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            dz_cam[i] = g * self.projected[i].depth_grad;
            let l = &self.lookups[i];
            for (&idx, &w) in l.index.iter().zip(&l.weight) {
                dz_light[idx] -= g * w;
            }
        }
        Ok((dz_cam, dz_light))
    }

    /// Backpropagate a mask gradient into field parameters through both the
    /// camera and the light pass.
    pub fn backward<F: OpacityField + ?Sized>(
        &self,
        field: &F,
        d_mask: &Map2<f64>,
        variant: MaskVariant,
        cfg: &ComparisonConfig,
        chunk_rays: usize,
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        let (dz_cam, dz_light) = self.depth_grads(d_mask, variant, cfg)?;
        self.camera.backward(field, &dz_cam, chunk_rays, grads)?;
        self.light.backward(field, &dz_light, chunk_rays, grads)
    }
}

pub(crate) fn backprop_chunks<F: OpacityField + ?Sized>(
    field: &F,
    jobs: &[(&[TracedRay], &[f64])],
    grads: &mut GradientBuffer,
) -> Result<()> {
    let n = field.num_params();
    if grads.len() != n {
        return Err(crate::error::mismatch(n, grads.len()));
    }
    let partial: Vec<Result<Option<GradientBuffer>>> = jobs
        .par_iter()
        .map(|(rays, up)| {
            if up.iter().all(|&g| g == 0.0) {
                return Ok(None);
            }
            let mut buf = GradientBuffer::zeros(n);
            backprop_rays(field, rays, up, &mut buf.data)?;
            Ok(Some(buf))
        })
        .collect();
    for p in partial {
        if let Some(buf) = p? {
            grads.merge(&buf)?;
        }
    }
    Ok(())
}

/// End-to-end prediction for one camera under one light.
pub fn predict_shadow_mask<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    light: &Camera,
    cfg: &ComparisonConfig,
    settings: &RenderSettings,
) -> Result<ShadowPrediction> {
    let light_settings = RenderSettings {
        seed: settings.seed ^ LIGHT_STREAM,
        ..*settings
    };
    let shadow_map = DepthPass::render_detached(field, light, &light_settings)?;
    let cam = DepthPass::render_detached(field, camera, settings)?;
    Ok(compare_passes(cam, &shadow_map, cfg, None)?.prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridField;
    use crate::geometry::Aabb;
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, v: &[f64]) -> Map2<f64> {
        Map2::from_vec(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn lookup_at_node_and_midpoint() {
        let sm = map(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(index_shadow_map(&sm, 1.0, 1.0, 0.0).value, 5.0);
        assert_eq!(index_shadow_map(&sm, 2.0, 0.0, 0.0).value, 3.0);
        assert!((index_shadow_map(&sm, 0.5, 0.0, 0.0).value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn lookup_gradient_is_bilinear_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sm = map(
            5,
            4,
            &(0..20).map(|_| rng.gen_range(0.0..3.0)).collect::<Vec<_>>(),
        );
        let (u, v) = (2.3, 1.8);
        let l = index_shadow_map(&sm, u, v, 0.0);
        let h = 1e-6;
        for (&idx, &w) in l.index.iter().zip(&l.weight) {
            let orig = sm.data[idx];
            sm.data[idx] = orig + h;
            let fp = index_shadow_map(&sm, u, v, 0.0).value;
            sm.data[idx] = orig - h;
            let fm = index_shadow_map(&sm, u, v, 0.0).value;
            sm.data[idx] = orig;
            assert!(((fp - fm) / (2.0 * h) - w).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_texels_are_skipped() {
        let sm = map(2, 2, &[2.0, 0.0, 4.0, 0.0]);
        let l = index_shadow_map(&sm, 0.5, 0.5, 1e-6);
        assert!(l.hit);
        assert!((l.value - 3.0).abs() < 1e-15);
        assert_eq!(l.weight, [0.5, 0.0, 0.5, 0.0]);
        let empty = index_shadow_map(&map(2, 2, &[0.0; 4]), 0.3, 0.6, 1e-6);
        assert!(!empty.hit);
        assert_eq!(empty.weight, [0.0; 4]);
    }

    #[test]
    fn coincident_depths_are_lit() {
        let z = map(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let valid = Map2::filled(2, 2, true);
        let p = soft_compare(&z, &z, &valid, 0.0, &ComparisonConfig::default()).unwrap();
        assert!(p.binary.data.iter().all(|&m| m == 0.0));
        assert!(p.degenerate);
        assert!(p.smooth.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn large_difference_saturates_binary() {
        let zc = map(1, 1, &[3.5]);
        let zl = map(1, 1, &[3.0]);
        let p = soft_compare(
            &zc,
            &zl,
            &Map2::filled(1, 1, true),
            0.0,
            &ComparisonConfig::default(),
        )
        .unwrap();
        // 0.5 / 1e-2 = 50, clamped to 1.
        assert_eq!(p.binary.data[0], 1.0);
    }

    #[test]
    fn smooth_normalization_fixed_points() {
        let zc = map(3, 1, &[0.0, 0.5, 1.0]);
        let zl = map(3, 1, &[0.0; 3]);
        let p = soft_compare(
            &zc,
            &zl,
            &Map2::filled(3, 1, true),
            0.0,
            &ComparisonConfig::default(),
        )
        .unwrap();
        assert_eq!(p.smooth.data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn invalid_pixels_carry_zero() {
        let zc = map(2, 1, &[5.0, 5.0]);
        let zl = map(2, 1, &[0.0, 0.0]);
        let valid = Map2::from_vec(2, 1, vec![true, false]).unwrap();
        let p = soft_compare(&zc, &zl, &valid, 0.0, &ComparisonConfig::default()).unwrap();
        assert_eq!(p.binary.data[1], 0.0);
        assert_eq!(p.smooth.data[1], 0.0);
    }

    #[test]
    fn masks_stay_in_unit_interval_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ComparisonConfig {
            epsilon: -0.5,
            ..Default::default()
        };
        for _ in 0..200 {
            let zc: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..2.0)).collect();
            let zl: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..2.0)).collect();
            let valid = Map2::filled(4, 4, true);
            let p = soft_compare(&map(4, 4, &zc), &map(4, 4, &zl), &valid, 0.0, &cfg).unwrap();
            assert!(p
                .binary
                .data
                .iter()
                .chain(&p.smooth.data)
                .all(|&m| (0.0..=1.0).contains(&m)));
            // Pushing one projected depth further never lowers its binary mask.
            let k = rng.gen_range(0..16);
            let mut zc2 = zc.clone();
            zc2[k] += rng.gen_range(0.0..0.5);
            let p2 = soft_compare(&map(4, 4, &zc2), &map(4, 4, &zl), &valid, 0.0, &cfg).unwrap();
            assert!(p2.binary.data[k] >= p.binary.data[k]);
        }
    }

    fn smooth_loss(pred: &ShadowPrediction, weights: &[f64]) -> f64 {
        pred.smooth
            .data
            .iter()
            .zip(weights)
            .map(|(m, w)| m * w)
            .sum()
    }

    #[test]
    fn smooth_delta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for cfg in [
            ComparisonConfig::default(),
            ComparisonConfig {
                use_sigmoid: true,
                mu_min: -2.0,
                mu_max: 3.0,
                ..Default::default()
            },
        ] {
            for _ in 0..20 {
                let zc: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.5..2.0)).collect();
                let zl = vec![0.0; 12];
                let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let valid = Map2::filled(4, 3, true);
                let eval = |zc: &[f64]| {
                    let p =
                        soft_compare(&map(4, 3, zc), &map(4, 3, &zl), &valid, 0.0, &cfg).unwrap();
                    smooth_loss(&p, &w)
                };
                let p = soft_compare(&map(4, 3, &zc), &map(4, 3, &zl), &valid, 0.0, &cfg).unwrap();
                let g = mask_to_delta_grad(&p, &w, MaskVariant::Smooth, &cfg);
                let h = 1e-7;
                for i in 0..12 {
                    if zc[i].abs() < 1e-5 {
                        continue;
                    }
                    let mut a = zc.clone();
                    a[i] += h;
                    let mut b = zc.clone();
                    b[i] -= h;
                    let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                    assert!(
                        (fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "i={i} fd={fd} an={}",
                        g[i]
                    );
                }
            }
        }
    }

    fn overhead_rig() -> (Camera, Camera) {
        let cam = Camera::look_at(
            12,
            12,
            14.0,
            Vec3::new(0.3, -0.2, 3.0),
            Vec3::zeros(),
            Vec3::y(),
            1.5,
            4.5,
        )
        .unwrap();
        let light = Camera::look_at(
            10,
            10,
            40.0,
            Vec3::new(2.0, 1.0, 8.0),
            Vec3::zeros(),
            Vec3::z(),
            6.0,
            11.0,
        )
        .unwrap();
        (cam, light)
    }

    #[test]
    fn zero_field_gives_empty_buffers_and_mask() {
        let g = GridField::filled([2, 2, 2], Aabb::cube(1.0), f64::NEG_INFINITY).unwrap();
        let (cam, light) = overhead_rig();
        let s = RenderSettings::default();
        let (zc, zl) = estimate_zbuffers(&g, &cam, &light, &s).unwrap();
        assert!(zc.data.iter().chain(&zl.data).all(|&z| z == 0.0));
        let pred = predict_shadow_mask(&g, &cam, &light, &ComparisonConfig::default(), &s).unwrap();
        assert!(pred.binary.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn shadow_map_size_is_independent() {
        let g = GridField::new([4, 4, 4], Aabb::cube(1.0)).unwrap();
        let cam = Camera::look_at(
            64,
            64,
            60.0,
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::zeros(),
            Vec3::y(),
            1.0,
            5.0,
        )
        .unwrap();
        let light = Camera::look_at(
            32,
            32,
            80.0,
            Vec3::new(0.0, 3.0, 6.0),
            Vec3::zeros(),
            Vec3::z(),
            4.0,
            9.0,
        )
        .unwrap();
        let (zc, zl) = estimate_zbuffers(
            &g,
            &cam,
            &light,
            &RenderSettings {
                samples: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((zc.width, zl.width), (64, 32));
    }

    #[test]
    fn camera_as_its_own_light_sees_no_shadow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = GridField::new([6, 6, 6], Aabb::cube(1.0)).unwrap();
        g.params_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-4.0..4.0));
        let (cam, _) = overhead_rig();
        let cfg = ComparisonConfig {
            bias: Some(0.0),
            ..Default::default()
        };
        let pred = predict_shadow_mask(
            &g,
            &cam,
            &cam,
            &cfg,
            &RenderSettings {
                samples: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let valid: Vec<f64> = pred
            .delta
            .data
            .iter()
            .zip(&pred.valid.data)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .collect();
        assert!(!valid.is_empty());
        assert!(valid.iter().all(|d| d.abs() < 1e-9));
        assert!(pred.binary.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut g = GridField::new([6, 6, 6], Aabb::cube(1.0)).unwrap();
        g.params_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-2.0..3.0));
        let (cam, light) = overhead_rig();
        let cfg = ComparisonConfig {
            bias: Some(0.0),
            ..Default::default()
        };
        let settings = RenderSettings {
            samples: 12,
            ..Default::default()
        };
        let objective = |g: &GridField, frozen: FrozenCoords<'_>| -> f64 {
            let sm = render_shadow_map(g, &light, &settings).unwrap();
            let fwd = shadow_forward(g, &cam, &sm, &cfg, &settings, frozen).unwrap();
            fwd.prediction.smooth.data.iter().sum::<f64>() / fwd.prediction.smooth.len() as f64
        };
        let sm = render_shadow_map(&g, &light, &settings).unwrap();
        let fwd = shadow_forward(&g, &cam, &sm, &cfg, &settings, None).unwrap();
        let frozen = fwd.frozen_coords();
        let n = fwd.prediction.smooth.len() as f64;
        let d_mask = Map2::filled(cam.width, cam.height, 1.0 / n);
        let mut grads = GradientBuffer::for_field(&g);
        fwd.backward(&g, &d_mask, MaskVariant::Smooth, &cfg, 37, &mut grads)
            .unwrap();
        let h = 1e-4;
        let mut order: Vec<usize> = (0..g.num_params()).collect();
        order.sort_by(|&a, &b| grads.data[b].abs().total_cmp(&grads.data[a].abs()));
        for &p in order.iter().take(15) {
            let orig = g.params()[p];
            g.params_mut()[p] = orig + h;
            let fp = objective(&g, Some(&frozen));
            g.params_mut()[p] = orig - h;
            let fm = objective(&g, Some(&frozen));
            g.params_mut()[p] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.data[p];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()),
                "param {p}: fd {fd} an {an}"
            );
        }
    }
}
