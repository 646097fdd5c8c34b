use crate::error::{invalid, Result};
use crate::geometry::Aabb;
use crate::recon::TriangleMesh;
use crate::Vec3;

/// Bounding-volume hierarchy over a triangle mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    mesh: TriangleMesh,
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: range into `order`; inner: child node indices.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

const LEAF_SIZE: usize = 4;

fn tri_bounds(t: &[Vec3; 3]) -> Aabb {
    Aabb {
        min: t[0].inf(&t[1]).inf(&t[2]),
        max: t[0].sup(&t[1]).sup(&t[2]),
    }
}

fn merge(a: &Aabb, b: &Aabb) -> Aabb {
    Aabb {
        min: a.min.inf(&b.min),
        max: a.max.sup(&b.max),
    }
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

fn slab(b: &Aabb, origin: &Vec3, inv_dir: &Vec3, far: f64) -> bool {
    let mut t0: f64 = 0.0;
    let mut t1 = far;
    for a in 0..3 {
        let ta = (b.min[a] - origin[a]) * inv_dir[a];
        let tb = (b.max[a] - origin[a]) * inv_dir[a];
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        // NaN from 0 * inf keeps the current interval.
        if lo > t0 {
            t0 = lo;
        }
        if hi < t1 {
            t1 = hi;
        }
        if t0 > t1 {
            return false;
        }
    }
    true
}

impl Bvh {
    pub fn new(mesh: TriangleMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(invalid("cannot build a BVH over an empty mesh"));
        }
        let mut bvh = Self {
            order: (0..mesh.faces.len()).collect(),
            mesh,
            nodes: Vec::new(),
        };
        let boxes: Vec<Aabb> = (0..bvh.mesh.faces.len())
            .map(|f| tri_bounds(&bvh.mesh.triangle(f)))
            .collect();
        let n = bvh.order.len();
        bvh.build(&boxes, 0, n);
        Ok(bvh)
    }

    fn build(&mut self, boxes: &[Aabb], start: usize, count: usize) -> usize {
        let ids = &mut self.order[start..start + count];
        let bounds = ids
            .iter()
            .skip(1)
            .fold(boxes[ids[0]], |acc, &i| merge(&acc, &boxes[i]));
        let node = self.nodes.len();
        self.nodes.push(BvhNode {
            bounds,
            start,
            count,
            left: 0,
            right: 0,
        });
        if count <= LEAF_SIZE {
            return node;
        }
        let ext = bounds.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = count / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            let ca = boxes[a].min[axis] + boxes[a].max[axis];
            let cb = boxes[b].min[axis] + boxes[b].max[axis];
            ca.total_cmp(&cb)
        });
        let left = self.build(boxes, start, mid);
        let right = self.build(boxes, start + mid, count - mid);
        let n = &mut self.nodes[node];
        n.count = 0;
        n.left = left;
        n.right = right;
        node
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    /// Nearest hit within `(0, far]` along `dir`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best = far;
        let mut hit = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !slab(&node.bounds, origin, &inv, best) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    if let Some(t) = ray_triangle(origin, dir, &self.mesh.triangle(f)) {
                        if t <= best {
                            best = t;
                            hit = Some(t);
                        }
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        hit
    }

    /// Number of surface crossings along a ray, for parity inside tests.
    fn crossings(&self, origin: &Vec3, dir: &Vec3) -> usize {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if !slab(&node.bounds, origin, &inv, f64::INFINITY) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    if ray_triangle(origin, dir, &self.mesh.triangle(f)).is_some() {
                        count += 1;
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        count
    }

    /// Majority vote of crossing parity along three skewed directions, which
    /// tolerates rays that graze an edge.
    pub fn inside(&self, p: &Vec3) -> bool {
        if !self.bounds().contains(p) {
            return false;
        }
        let dirs = [
            Vec3::new(0.5377, 0.3123, 0.7834).normalize(),
            Vec3::new(-0.6211, 0.7012, 0.3497).normalize(),
            Vec3::new(0.2283, -0.8471, -0.4799).normalize(),
        ];
        dirs.iter()
            .filter(|d| self.crossings(p, d) % 2 == 1)
            .count()
            >= 2
    }
}

/// Scale and translate a mesh to be `height` tall, centered over the origin
/// and resting on `z = 0`.
pub fn normalize_mesh(mesh: &TriangleMesh, height: f64) -> Result<TriangleMesh> {
    let b = mesh
        .bounds()
        .ok_or_else(|| invalid("mesh has no vertices"))?;
    let ext = b.extent();
    let size = ext.max();
    if !(size > 0.0) {
        return Err(invalid("mesh has zero extent"));
    }
    let s = height / size;
    let c = b.center();
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| Vec3::new((v.x - c.x) * s, (v.y - c.y) * s, (v.z - b.min.z) * s))
        .collect();
    TriangleMesh::new(vertices, mesh.faces.clone())
}

/// Closed axis-aligned box as 12 triangles.
#[cfg(test)]
pub(crate) fn cube_mesh(lo: Vec3, hi: Vec3) -> TriangleMesh {
    let c = |i: usize| {
        Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    let vertices = (0..8).map(c).collect();
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh::new(vertices, faces).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_hit_and_miss() {
        let tri = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        let t = ray_triangle(&Vec3::new(0.2, 0.2, 1.0), &Vec3::new(0.0, 0.0, -1.0), &tri).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        assert!(
            ray_triangle(&Vec3::new(0.8, 0.8, 1.0), &Vec3::new(0.0, 0.0, -1.0), &tri).is_none()
        );
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut mesh = cube_mesh(Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 1.0));
        mesh.append(&cube_mesh(
            Vec3::new(0.7, -0.2, 0.0),
            Vec3::new(1.0, 0.1, 0.4),
        ));
        let bvh = Bvh::new(mesh.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let o = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..3.0),
            );
            let d = (Vec3::new(
                rng.gen_range(-0.5..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.0..1.0),
            ) - o)
                .normalize();
            let brute = (0..mesh.faces.len())
                .filter_map(|f| ray_triangle(&o, &d, &mesh.triangle(f)))
                .fold(None, |acc: Option<f64>, t| {
                    Some(acc.map_or(t, |a| a.min(t)))
                });
            assert_eq!(bvh.raycast(&o, &d, f64::INFINITY), brute);
        }
    }

    #[test]
    fn parity_inside_test() {
        let bvh = Bvh::new(cube_mesh(
            Vec3::new(-0.5, -0.5, 0.0),
            Vec3::new(0.5, 0.5, 1.0),
        ))
        .unwrap();
        assert!(bvh.inside(&Vec3::new(0.0, 0.0, 0.5)));
        assert!(bvh.inside(&Vec3::new(0.45, -0.45, 0.95)));
        assert!(!bvh.inside(&Vec3::new(0.0, 0.0, 1.5)));
        assert!(!bvh.inside(&Vec3::new(0.6, 0.0, 0.5)));
    }

    #[test]
    fn normalization_rests_on_ground() {
        let m = cube_mesh(Vec3::new(3.0, 4.0, 5.0), Vec3::new(5.0, 5.0, 6.0));
        let n = normalize_mesh(&m, 1.0).unwrap();
        let b = n.bounds().unwrap();
        assert!((b.min.z).abs() < 1e-12);
        assert!((b.extent().max() - 1.0).abs() < 1e-12);
        assert!(b.center().x.abs() < 1e-12 && b.center().y.abs() < 1e-12);
    }
}
