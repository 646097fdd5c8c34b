use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::map::Map2;

/// How binary ground-truth masks are turned into regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `M + w_c + w₀·exp(−(d₁ + d₂)² / 2σ²)` with boundary distances.
    #[default]
    DistanceTransform,
    /// Gaussian blur of `M` with standard deviation σ, plus `w_c`. Kept for
    /// comparison only.
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceTransformConfig {
    pub w0: f64,
    pub class_balance: bool,
    pub mode: WeightMode,
}

impl Default for DistanceTransformConfig {
    fn default() -> Self {
        Self {
            w0: 10.0,
            class_balance: false,
            mode: WeightMode::DistanceTransform,
        }
    }
}

impl DistanceTransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return Err(invalid(format!(
                "w0 must be finite and nonnegative, got {}",
                self.w0
            )));
        }
        Ok(())
    }
}

/// Regression target derived from a binary mask at one `σ_dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMask {
    pub weights: Map2<f64>,
    pub source: String,
    pub sigma_dt: f64,
}

/// Boundary distances per pixel: nearest and second-nearest shadow
/// component. Infinite when the mask has no boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDistances {
    pub d1: Map2<f64>,
    pub d2: Map2<f64>,
    pub components: usize,
}

fn is_shadow(v: f64) -> bool {
    v >= 0.5
}

/// 8-connected labeling of shadow pixels; lit pixels get `usize::MAX`.
pub fn label_components(mask: &Map2<f64>) -> (Map2<usize>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = Map2::filled(w, h, usize::MAX);
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !is_shadow(mask.data[start]) || labels.data[start] != usize::MAX {
            continue;
        }
        labels.data[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if is_shadow(mask.data[q]) && labels.data[q] == usize::MAX {
                        labels.data[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
        count += 1;
    }
    (labels, count)
}

/// Shadow pixels with at least one 4-neighbour that is lit.
pub fn boundary_pixels(mask: &Map2<f64>) -> Map2<bool> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Map2::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !is_shadow(*mask.get(x, y)) {
                continue;
            }
            let lit = |nx: usize, ny: usize| !is_shadow(*mask.get(nx, ny));
            *out.get_mut(x, y) = (x > 0 && lit(x - 1, y))
                || (x + 1 < w && lit(x + 1, y))
                || (y > 0 && lit(x, y - 1))
                || (y + 1 < h && lit(x, y + 1));
        }
    }
    out
}

/// 1D squared distance transform by lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = f.iter().position(|x| x.is_finite());
    let Some(start) = first.take() else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (in pixels) to the nearest `true` pixel, by two
/// separable passes. Infinite everywhere when there is none.
pub fn euclidean_distance_transform(features: &Map2<bool>) -> Map2<f64> {
    let (w, h) = (features.width, features.height);
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut sq = Map2::filled(w, h, 0.0);
    for x in 0..w {
        for (y, c) in col.iter_mut().enumerate() {
            *c = if *features.get(x, y) {
                0.0
            } else {
                f64::INFINITY
            };
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for (y, &c) in col_out.iter().enumerate() {
            *sq.get_mut(x, y) = c;
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &sq.data[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        sq.data[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    sq.map(|d| d.sqrt())
}

/// Distances to the nearest and second-nearest shadow component boundary.
/// With a single component `d₂ = d₁`.
pub fn boundary_distances(mask: &Map2<f64>) -> BoundaryDistances {
    let (w, h) = (mask.width, mask.height);
    let (labels, count) = label_components(mask);
    let boundary = boundary_pixels(mask);
    let mut d1 = Map2::filled(w, h, f64::INFINITY);
    let mut d2 = Map2::filled(w, h, f64::INFINITY);
    let mut with_boundary = 0;
    for c in 0..count {
        let feats = Map2 {
            width: w,
            height: h,
            data: boundary
                .data
                .iter()
                .zip(&labels.data)
                .map(|(&b, &l)| b && l == c)
                .collect(),
        };
        if !feats.data.iter().any(|&b| b) {
            continue;
        }
        with_boundary += 1;
        let d = euclidean_distance_transform(&feats);
        for i in 0..d.len() {
            let v = d.data[i];
            if v < d1.data[i] {
                d2.data[i] = d1.data[i];
                d1.data[i] = v;
            } else if v < d2.data[i] {
                d2.data[i] = v;
            }
        }
    }
    if with_boundary == 1 {
        d2 = d1.clone();
    }
    BoundaryDistances {
        d1,
        d2,
        components: with_boundary,
    }
}

/// Class-balancing term: minority-class frequency over the frequency of the
/// pixel's own class.
pub fn class_balance(mask: &Map2<f64>) -> Map2<f64> {
    let n = mask.len().max(1) as f64;
    let shadow = mask.data.iter().filter(|&&v| is_shadow(v)).count() as f64 / n;
    let lit = 1.0 - shadow;
    let minority = shadow.min(lit);
    mask.map(|&v| {
        let own = if is_shadow(v) { shadow } else { lit };
        if own > 0.0 {
            minority / own
        } else {
            0.0
        }
    })
}

fn check_binary(mask: &Map2<f64>) -> Result<()> {
    if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("mask values must be 0 or 1"));
    }
    Ok(())
}

pub fn distance_transform_weight(
    mask: &Map2<f64>,
    sigma_dt: f64,
    cfg: &DistanceTransformConfig,
    source: &str,
) -> Result<WeightedMask> {
    check_binary(mask)?;
    cfg.validate()?;
    if !(sigma_dt > 0.0) {
        return Err(invalid(format!(
            "sigma_dt must be positive, got {sigma_dt}"
        )));
    }
    let wc = if cfg.class_balance {
        class_balance(mask)
    } else {
        Map2::filled(mask.width, mask.height, 0.0)
    };
    let weights = match cfg.mode {
        WeightMode::DistanceTransform => {
            let d = boundary_distances(mask);
            let mut out = mask.clone();
            for i in 0..out.len() {
                let s = d.d1.data[i] + d.d2.data[i];
                let halo = if s.is_finite() {
                    cfg.w0 * (-(s * s) / (2.0 * sigma_dt * sigma_dt)).exp()
                } else {
                    0.0
                };
                out.data[i] += wc.data[i] + halo;
            }
            out
        }
        WeightMode::Blur => {
            let mut out = gaussian_blur(mask, sigma_dt);
            for (o, c) in out.data.iter_mut().zip(&wc.data) {
                *o += c;
            }
            out
        }
    };
    Ok(WeightedMask {
        weights,
        source: source.to_string(),
        sigma_dt,
    })
}

/// Separable Gaussian blur with edge clamping; the kernel spans 3σ.
pub fn gaussian_blur(img: &Map2<f64>, sigma: f64) -> Map2<f64> {
    let radius = (3.0 * sigma).ceil().min(img.width.max(img.height) as f64) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &Map2<f64>, horizontal: bool| -> Map2<f64> {
        let mut dst = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    acc += kv * src.get(sx as usize, sy as usize);
                }
                *dst.get_mut(x as usize, y as usize) = acc / norm;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}
