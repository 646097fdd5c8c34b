//! Differentiable volumetric compositing of expected ray-termination
//! distance: `D̂ = Σ Tᵢ αᵢ tᵢ` with `αᵢ = 1 − exp(−σᵢ δᵢ)` and
//! `Tᵢ = Π_{j<i} (1 − αⱼ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};
use crate::field::OpacityField;
use crate::geometry::{Camera, Ray};
use crate::map::Map2;

pub type RangeMap = Map2<f64>;

/// Samples along one ray plus the forward cache needed by the adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    cache: Option<CompositeCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeCache {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl RaySamples {
    /// Gaps are `tᵢ₊₁ − tᵢ`, with the last one closing at `far`.
    pub fn new(t: Vec<f64>, far: f64, sigma: Vec<f64>) -> Result<Self> {
        if t.is_empty() {
            return Err(invalid("a ray needs at least one sample"));
        }
        if t.len() != sigma.len() {
            return Err(mismatch(t.len(), sigma.len()));
        }
        let mut delta = Vec::with_capacity(t.len());
        for w in t.windows(2) {
            delta.push(w[1] - w[0]);
        }
        delta.push(far - t[t.len() - 1]);
        if delta.iter().any(|&d| !(d > 0.0)) {
            return Err(invalid(
                "sample distances must be strictly ascending and below far",
            ));
        }
        if sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(invalid("opacities must be nonnegative"));
        }
        Ok(Self {
            t,
            delta,
            sigma,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn cache(&self) -> Option<&CompositeCache> {
        self.cache.as_ref()
    }

    /// Termination weights `Tᵢ αᵢ` (requires a prior forward pass).
    pub fn weights(&self) -> Option<Vec<f64>> {
        self.cache.as_ref().map(|c| {
            c.alpha
                .iter()
                .zip(&c.transmittance)
                .map(|(a, t)| a * t)
                .collect()
        })
    }
}

/// Mixes a base seed with a ray index into an independent per-ray seed.
#[inline]
pub fn ray_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        ^ index
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stratified distances in `[near, far]`: bin midpoints, or one uniform draw
/// per bin when `jitter` is set.
pub fn sample_ray(near: f64, far: f64, n: usize, jitter: bool, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    if !(near < far) {
        return Err(invalid(format!("need near < far, got {near} and {far}")));
    }
    let step = (far - near) / n as f64;
    if jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|i| near + (i as f64 + rng.gen::<f64>()) * step)
            .collect())
    } else {
        Ok((0..n).map(|i| near + (i as f64 + 0.5) * step).collect())
    }
}

/// Forward compositing; fills the cache used by [`composite_range_backward`].
pub fn composite_range(samples: &mut RaySamples) -> f64 {
    let n = samples.len();
    let mut alpha = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut t_acc = 1.0;
    let mut range = 0.0;
    for i in 0..n {
        let a = -(-samples.sigma[i] * samples.delta[i]).exp_m1();
        alpha.push(a);
        trans.push(t_acc);
        range += t_acc * a * samples.t[i];
        t_acc *= 1.0 - a;
    }
    samples.cache = Some(CompositeCache {
        alpha,
        transmittance: trans,
    });
    range
}

/// `∂D̂/∂σᵢ · upstream`, using
/// `∂D̂/∂σᵢ = δᵢ [Tᵢ(1−αᵢ)tᵢ − Σ_{k>i} T_k α_k t_k]`.
pub fn composite_range_backward(samples: &RaySamples, upstream: f64) -> Result<Vec<f64>> {
    let cache = samples
        .cache
        .as_ref()
        .ok_or_else(|| invalid("composite_range must run before its backward pass"))?;
    let n = samples.len();
    let mut out = vec![0.0; n];
    if upstream == 0.0 {
        return Ok(out);
    }
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let (a, tr, t) = (cache.alpha[i], cache.transmittance[i], samples.t[i]);
        out[i] = upstream * samples.delta[i] * (tr * (1.0 - a) * t - suffix);
        suffix += tr * a * t;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub samples: usize,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples: 64,
            jitter: false,
            seed: 0,
        }
    }
}

/// A ray traced through a field, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TracedRay {
    pub ray: Ray,
    pub samples: RaySamples,
    pub range: f64,
}

/// Trace one pixel; `index` decorrelates jitter across rays.
pub fn trace_pixel<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    px: f64,
    py: f64,
    index: u64,
    settings: &RenderSettings,
) -> Result<TracedRay> {
    let ray = camera.ray(px, py);
    let t = sample_ray(
        camera.near,
        camera.far,
        settings.samples,
        settings.jitter,
        ray_seed(settings.seed, index),
    )?;
    let sigma = t.iter().map(|&ti| field.density(&ray.at(ti))).collect();
    let mut samples = RaySamples::new(t, camera.far, sigma)?;
    let range = composite_range(&mut samples);
    Ok(TracedRay {
        ray,
        samples,
        range,
    })
}

/// Expected range of one pixel without keeping samples for a backward pass.
/// Matches [`trace_pixel`] exactly; it stops once transmittance is zero.
pub fn trace_range<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    px: f64,
    py: f64,
    index: u64,
    settings: &RenderSettings,
) -> Result<f64> {
    let ray = camera.ray(px, py);
    let t = sample_ray(
        camera.near,
        camera.far,
        settings.samples,
        settings.jitter,
        ray_seed(settings.seed, index),
    )?;
    let mut t_acc = 1.0;
    let mut range = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        let delta = t.get(i + 1).copied().unwrap_or(camera.far) - ti;
        let a = -(-field.density(&ray.at(ti)) * delta).exp_m1();
        range += t_acc * a * ti;
        t_acc *= 1.0 - a;
        if t_acc == 0.0 {
            break;
        }
    }
    Ok(range)
}

/// Trace every pixel of `camera` in row-major order.
pub fn trace_image<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Vec<TracedRay>> {
    (0..camera.num_pixels())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % camera.width, i / camera.width);
            trace_pixel(field, camera, x as f64, y as f64, i as u64, settings)
        })
        .collect()
}

/// Accumulate `Σ_rays upstream_r · ∂D̂_r/∂θ` into `grads`.
pub fn backprop_rays<F: OpacityField + ?Sized>(
    field: &F,
    rays: &[TracedRay],
    upstream: &[f64],
    grads: &mut [f64],
) -> Result<()> {
    if rays.len() != upstream.len() {
        return Err(mismatch(rays.len(), upstream.len()));
    }
    for (tr, &g) in rays.iter().zip(upstream) {
        if g == 0.0 {
            continue;
        }
        let dsigma = composite_range_backward(&tr.samples, g)?;
        for (&ti, &ds) in tr.samples.t.iter().zip(&dsigma) {
            if ds != 0.0 {
                field.accumulate_grad(&tr.ray.at(ti), ds, grads);
            }
        }
    }
    Ok(())
}

pub fn render_range_map<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RangeMap> {
    let data = (0..camera.num_pixels())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % camera.width, i / camera.width);
            trace_range(field, camera, x as f64, y as f64, i as u64, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Map2::from_vec(camera.width, camera.height, data)
}

/// Per-pixel accumulated opacity `Σ Tᵢ αᵢ`.
pub fn render_opacity_map<F: OpacityField + ?Sized>(
    field: &F,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Map2<f64>> {
    let traced = trace_image(field, camera, settings)?;
    let data = traced
        .iter()
        .map(|t| t.samples.weights().map_or(0.0, |w| w.iter().sum()))
        .collect();
    Map2::from_vec(camera.width, camera.height, data)
}
