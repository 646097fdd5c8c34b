use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Crop;
use crate::error::{invalid, Result};
use crate::geometry::Aabb;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid("mesh has non-finite vertices"));
        }
        if faces.iter().flatten().any(|&i| i >= vertices.len()) {
            return Err(invalid("mesh face index out of range"));
        }
        Ok(Self { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i])
    }

    pub fn area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let first = *self.vertices.first()?;
        let (lo, hi) = self
            .vertices
            .iter()
            .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v)));
        Some(Aabb { min: lo, max: hi })
    }

    /// Faces whose three vertices all lie inside the crop, with unused
    /// vertices dropped.
    pub fn cropped(&self, crop: &Crop) -> TriangleMesh {
        let inside: Vec<bool> = self.vertices.iter().map(|v| crop.contains(v)).collect();
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut out = TriangleMesh::default();
        for f in &self.faces {
            if !f.iter().all(|&i| inside[i]) {
                continue;
            }
            let g = f.map(|i| {
                if remap[i] == usize::MAX {
                    remap[i] = out.vertices.len();
                    out.vertices.push(self.vertices[i]);
                }
                remap[i]
            });
            out.faces.push(g);
        }
        out
    }

    /// Append another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|i| i + base)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub source: String,
}

/// Area-weighted uniform surface samples, deterministic per seed.
pub fn sample_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.faces.is_empty() {
        return Err(invalid("cannot sample an empty mesh"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.area(f);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(invalid("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let f = cumulative
                .partition_point(|&c| c <= u)
                .min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect();
    Ok(PointCloud {
        points,
        source: "mesh".into(),
    })
}
