use crate::error::{invalid, Result};
use crate::geometry::Aabb;
use crate::Vec3;

use super::{initial_raw, sigmoid, softplus, OpacityField};

/// Dense voxel grid of raw values at lattice vertices, trilinearly
/// interpolated and passed through softplus. Vertices span `bounds`
/// inclusively; points outside the box have zero opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    resolution: [usize; 3],
    bounds: Aabb,
    spacing: Vec3,
    values: Vec<f64>,
}

/// Eight vertex indices and trilinear weights around a point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

// Fractional lattice coordinates within this distance of an integer are
// snapped onto the vertex so that sampling a vertex returns it exactly.
const SNAP: f64 = 1e-9;

impl GridField {
    /// Grid initialized to a near-transparent opacity of 0.01.
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<Self> {
        Self::filled(resolution, bounds, initial_raw())
    }

    pub fn filled(resolution: [usize; 3], bounds: Aabb, raw: f64) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(invalid(format!(
                "grid resolution must be >= 2 per axis, got {resolution:?}"
            )));
        }
        let ext = bounds.extent();
        let spacing = Vec3::new(
            ext.x / (resolution[0] - 1) as f64,
            ext.y / (resolution[1] - 1) as f64,
            ext.z / (resolution[2] - 1) as f64,
        );
        Ok(Self {
            resolution,
            bounds,
            spacing,
            values: vec![raw; resolution.iter().product()],
        })
    }

    /// Grid whose raw value at each vertex is `f(vertex position)`.
    pub fn from_fn(resolution: [usize; 3], bounds: Aabb, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let mut g = Self::filled(resolution, bounds, 0.0)?;
        for k in 0..resolution[2] {
            for j in 0..resolution[1] {
                for i in 0..resolution[0] {
                    let p = g.vertex_position(i, j, k);
                    let idx = g.vertex_index(i, j, k);
                    g.values[idx] = f(&p);
                }
            }
        }
        Ok(g)
    }

    pub fn with_values(resolution: [usize; 3], bounds: Aabb, values: Vec<f64>) -> Result<Self> {
        let mut g = Self::filled(resolution, bounds, 0.0)?;
        if values.len() != g.values.len() {
            return Err(crate::error::mismatch(g.values.len(), values.len()));
        }
        g.values = values;
        Ok(g)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.bounds.min
            + Vec3::new(
                i as f64 * self.spacing.x,
                j as f64 * self.spacing.y,
                k as f64 * self.spacing.z,
            )
    }

    #[inline]
    fn axis(&self, x: f64, axis: usize) -> Option<(usize, f64)> {
        let lo = self.bounds.min[axis];
        let hi = self.bounds.max[axis];
        if !(x >= lo && x <= hi) {
            return None;
        }
        let mut g = (x - lo) / self.spacing[axis];
        let r = g.round();
        if (g - r).abs() < SNAP {
            g = r;
        }
        let last = self.resolution[axis] - 2;
        let i = (g.floor() as usize).min(last);
        Some((i, g - i as f64))
    }

    #[inline]
    pub(crate) fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        let (i, fx) = self.axis(x.x, 0)?;
        let (j, fy) = self.axis(x.y, 1)?;
        let (k, fz) = self.axis(x.z, 2)?;
        let sx = 1;
        let sy = self.resolution[0];
        let sz = self.resolution[0] * self.resolution[1];
        let base = self.vertex_index(i, j, k);
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Some(Stencil {
            index: [
                base,
                base + sx,
                base + sy,
                base + sx + sy,
                base + sz,
                base + sx + sz,
                base + sy + sz,
                base + sx + sy + sz,
            ],
            weight: [
                gx * gy * gz,
                fx * gy * gz,
                gx * fy * gz,
                fx * fy * gz,
                gx * gy * fz,
                fx * gy * fz,
                gx * fy * fz,
                fx * fy * fz,
            ],
        })
    }

    #[inline]
    fn interpolate(&self, s: &Stencil) -> f64 {
        s.index
            .iter()
            .zip(&s.weight)
            .map(|(&i, &w)| self.values[i] * w)
            .sum()
    }
}

impl OpacityField for GridField {
    fn params(&self) -> &[f64] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    fn raw(&self, x: &Vec3) -> Option<f64> {
        self.stencil(x).map(|s| self.interpolate(&s))
    }

    #[inline]
    fn density(&self, x: &Vec3) -> f64 {
        self.raw(x).map_or(0.0, softplus)
    }

    #[inline]
    fn accumulate_grad(&self, x: &Vec3, upstream: f64, grads: &mut [f64]) {
        if let Some(s) = self.stencil(x) {
            let scale = upstream * sigmoid(self.interpolate(&s));
            for (&i, &w) in s.index.iter().zip(&s.weight) {
                grads[i] += scale * w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{query, query_backward, GradientBuffer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(res: [usize; 3], seed: u64) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = GridField::new(res, Aabb::cube(1.0)).unwrap();
        for v in g.params_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        g
    }

    #[test]
    fn rejects_tiny_resolution() {
        assert!(GridField::new([1, 4, 4], Aabb::cube(1.0)).is_err());
    }

    #[test]
    fn vertex_query_is_exact() {
        let g = random_grid([5, 4, 6], 1);
        for (i, j, k) in [(0, 0, 0), (4, 3, 5), (2, 1, 3), (4, 0, 2)] {
            let p = g.vertex_position(i, j, k);
            let raw = g.values()[g.vertex_index(i, j, k)];
            assert_eq!(g.raw(&p), Some(raw));
            assert_eq!(g.density(&p), softplus(raw));
        }
    }

    #[test]
    fn midpoint_interpolates_before_activation() {
        let mut g = GridField::filled([2, 2, 2], Aabb::cube(1.0), 0.0).unwrap();
        // Vary only along x: a on the x = -1 face, b on the x = +1 face.
        let (a, b) = (-1.5, 2.5);
        for k in 0..2 {
            for j in 0..2 {
                let i0 = g.vertex_index(0, j, k);
                let i1 = g.vertex_index(1, j, k);
                g.params_mut()[i0] = a;
                g.params_mut()[i1] = b;
            }
        }
        let s = g.density(&Vec3::new(0.0, 0.3, -0.7));
        assert!((s - softplus((a + b) / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn outside_bounds_is_zero() {
        let g = random_grid([4, 4, 4], 2);
        assert_eq!(g.density(&Vec3::new(2.0, 0.0, 0.0)), 0.0);
        assert_eq!(g.density(&Vec3::new(0.0, 0.0, -2.0)), 0.0);
        let mut grads = GradientBuffer::for_field(&g);
        query_backward(&g, &[Vec3::new(2.0, 0.0, 0.0)], &[1.0], &mut grads).unwrap();
        assert!(grads.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_leaves_grads() {
        let g = random_grid([4, 4, 4], 3);
        let mut grads = GradientBuffer::for_field(&g);
        grads.data[5] = 0.25;
        query_backward(&g, &[Vec3::new(0.1, 0.2, 0.3)], &[0.0], &mut grads).unwrap();
        assert_eq!(grads.data[5], 0.25);
        assert_eq!(grads.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn vertex_gradient_is_sigmoid_of_raw() {
        let g = random_grid([4, 4, 4], 4);
        let p = g.vertex_position(1, 2, 3);
        let idx = g.vertex_index(1, 2, 3);
        let mut grads = GradientBuffer::for_field(&g);
        query_backward(&g, &[p], &[1.0], &mut grads).unwrap();
        assert!((grads.data[idx] - sigmoid(g.values()[idx])).abs() < 1e-15);
        assert_eq!(grads.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn buffer_length_mismatch() {
        let g = random_grid([4, 4, 4], 5);
        let mut grads = GradientBuffer::zeros(3);
        assert!(query_backward(&g, &[Vec3::zeros()], &[1.0], &mut grads).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let mut g = random_grid([3 + trial, 8, 5], 10 + trial as u64);
            let points: Vec<Vec3> = (0..20)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let upstream: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grads = GradientBuffer::for_field(&g);
            query_backward(&g, &points, &upstream, &mut grads).unwrap();
            let objective = |g: &GridField| -> f64 {
                query(g, &points)
                    .iter()
                    .zip(&upstream)
                    .map(|(s, u)| s * u)
                    .sum()
            };
            let h = 1e-4;
            for p in 0..g.num_params() {
                let orig = g.params()[p];
                g.params_mut()[p] = orig + h;
                let fp = objective(&g);
                g.params_mut()[p] = orig - h;
                let fm = objective(&g);
                g.params_mut()[p] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.data[p];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                    "param {p}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn continuity_under_small_moves() {
        let g = random_grid([6, 6, 6], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let max_raw = g.values().iter().cloned().fold(f64::MIN, f64::max);
        let min_raw = g.values().iter().cloned().fold(f64::MAX, f64::min);
        // |∇raw| <= (max-min)/spacing per axis; softplus is 1-Lipschitz.
        let lip = (max_raw - min_raw) / g.spacing().min() * 3f64.sqrt();
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
                rng.gen_range(-0.99..0.99),
            );
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let q = p + dir * 1e-6;
            assert!((g.density(&p) - g.density(&q)).abs() <= lip * 1e-6 + 1e-15);
        }
    }
}
