use std::collections::HashMap;

use super::mesh::TriangleMesh;
use super::tables::TRIANGLE_TABLE;
use super::ScalarVolume;
use crate::Vec3;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangulate the `iso` level set. Vertices are shared between cells (one
/// per crossed lattice edge), and triangles face towards lower values.
pub fn marching_cubes(volume: &ScalarVolume, iso: f64) -> TriangleMesh {
    let r = volume.resolution;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    // Lattice edge (lower node index, axis) -> vertex index.
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let nodes: [[usize; 3]; 8] = CORNERS.map(|c| [i + c[0], j + c[1], k + c[2]]);
                let vals = nodes.map(|n| volume.value(n[0], n[1], n[2]));
                let mut case = 0usize;
                for (b, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << b;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                let mut local = [usize::MAX; 12];
                for tri in row.chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let mut ids = [0usize; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == usize::MAX {
                            let [a, b] = EDGES[e];
                            let (na, nb) = (nodes[a], nodes[b]);
                            let lo = if volume.index(na[0], na[1], na[2])
                                < volume.index(nb[0], nb[1], nb[2])
                            {
                                na
                            } else {
                                nb
                            };
                            let axis = (0..3).find(|&d| na[d] != nb[d]).unwrap();
                            let key = (volume.index(lo[0], lo[1], lo[2]), axis);
                            local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                vertices.push(interpolate(
                                    volume.position(na[0], na[1], na[2]),
                                    volume.position(nb[0], nb[1], nb[2]),
                                    vals[a],
                                    vals[b],
                                    iso,
                                ));
                                vertices.len() - 1
                            });
                        }
                        *slot = local[e];
                    }
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        faces.push(ids);
                    }
                }
            }
        }
    }
    TriangleMesh { vertices, faces }
}

fn interpolate(pa: Vec3, pb: Vec3, va: f64, vb: f64, iso: f64) -> Vec3 {
    let d = vb - va;
    if d.abs() < 1e-300 {
        return (pa + pb) * 0.5;
    }
    let t = ((iso - va) / d).clamp(0.0, 1.0);
    pa + (pb - pa) * t
}
