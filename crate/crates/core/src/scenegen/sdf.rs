use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Ray};
use crate::Vec3;

/// Analytic solid with an exact signed distance (negative inside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Box rotated by `yaw` radians about the vertical axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Solid of revolution about the vertical line through `base`. The
    /// profile lists `(radius, height)` pairs running from the bottom axis
    /// point to the top axis point.
    Lathe {
        base: [f64; 3],
        profile: Vec<[f64; 2]>,
    },
}

fn v(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - v(center)).norm() - radius,
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let d = p - v(center);
                let (s, c) = yaw.sin_cos();
                let local = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let q = local.abs() - v(half_extents);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Lathe { base, profile } => {
                let d = p - v(base);
                let r = (d.x * d.x + d.y * d.y).sqrt();
                polygon_distance(profile, r, d.z)
            }
        }
    }

    pub fn bounds(&self) -> Aabb {
        match self {
            Shape::Sphere { center, radius } => Aabb {
                min: v(center).add_scalar(-radius),
                max: v(center).add_scalar(*radius),
            },
            Shape::Box {
                center,
                half_extents,
                yaw,
            } => {
                let (s, c) = yaw.sin_cos();
                let h = v(half_extents);
                let ex = Vec3::new(
                    c.abs() * h.x + s.abs() * h.y,
                    s.abs() * h.x + c.abs() * h.y,
                    h.z,
                );
                Aabb {
                    min: v(center) - ex,
                    max: v(center) + ex,
                }
            }
            Shape::Lathe { base, profile } => {
                let r = profile.iter().map(|q| q[0]).fold(0.0, f64::max);
                let zlo = profile.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
                let zhi = profile
                    .iter()
                    .map(|q| q[1])
                    .fold(f64::NEG_INFINITY, f64::max);
                let b = v(base);
                Aabb {
                    min: Vec3::new(b.x - r, b.y - r, b.z + zlo),
                    max: Vec3::new(b.x + r, b.y + r, b.z + zhi),
                }
            }
        }
    }
}

/// Signed distance from `(r, z)` to the profile polygon mirrored across the
/// axis, so the axis itself is not a boundary.
fn polygon_distance(profile: &[[f64; 2]], r: f64, z: f64) -> f64 {
    let mut poly: Vec<[f64; 2]> = profile.to_vec();
    poly.extend(profile.iter().rev().map(|q| [-q[0], q[1]]));
    let p = [r, z];
    let n = poly.len();
    let sub = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut d = dot(sub(p, poly[0]), sub(p, poly[0]));
    let mut sign = 1.0;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (poly[i], poly[j]);
        let e = sub(vj, vi);
        let w = sub(p, vi);
        let ee = dot(e, e);
        if ee > 0.0 {
            let t = (dot(w, e) / ee).clamp(0.0, 1.0);
            let b = [w[0] - e[0] * t, w[1] - e[1] * t];
            d = d.min(dot(b, b));
        }
        let c1 = p[1] >= vi[1];
        let c2 = p[1] < vj[1];
        let c3 = e[0] * w[1] > e[1] * w[0];
        if (c1 && c2 && c3) || (!c1 && !c2 && !c3) {
            sign = -sign;
        }
        j = i;
    }
    sign * d.sqrt()
}

/// Union of analytic shapes over an optional horizontal ground plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfScene {
    pub name: String,
    pub shapes: Vec<Shape>,
    /// Height of the ground plane; everything below it is solid.
    pub ground: Option<f64>,
    /// Clips the ground solid to a box; see [`ground_solid`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<Aabb>,
}

impl SdfScene {
    /// Distance to the objects only (ground excluded).
    pub fn object_distance(&self, p: &Vec3) -> f64 {
        self.shapes
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Full scene distance: objects united with the ground solid.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let obj = self.object_distance(p);
        match ground_solid(self.ground, self.platform.as_ref()) {
            Some(g) => obj.min(g.distance(p)),
            None => obj,
        }
    }

    pub fn object_bounds(&self) -> Option<Aabb> {
        let mut it = self.shapes.iter().map(Shape::bounds);
        let first = it.next()?;
        Some(it.fold(first, |a, b| Aabb {
            min: a.min.inf(&b.min),
            max: a.max.sup(&b.max),
        }))
    }
}

/// Sphere-traced first hit of the objects along a unit direction. Never
/// reports a hit in front of the true surface.
pub fn sphere_trace(scene: &SdfScene, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
    const TOL: f64 = 1e-5;
    const MAX_STEPS: usize = 2048;
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        if t > far {
            return None;
        }
        let d = scene.object_distance(&(origin + dir * t));
        if d < TOL {
            return Some(t);
        }
        t += d;
    }
    None
}

/// First hit along a unit direction within `[0, far]`: the ground plane is
/// intersected analytically, objects are sphere traced.
pub fn raycast_depth(scene: &SdfScene, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
    let hit =
        ground_solid(scene.ground, scene.platform.as_ref()).and_then(|g| g.hit(origin, dir, far));
    sphere_trace(scene, origin, dir, hit.unwrap_or(far)).or(hit)
}

/// Solid ground below a plane: either the whole half-space or, with a
/// platform, the box between the platform floor and the plane over the
/// platform's horizontal extent. A finite platform matches a field that is
/// only supported inside its bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundSolid {
    HalfSpace(f64),
    Platform(Aabb),
}

pub fn ground_solid(ground: Option<f64>, platform: Option<&Aabb>) -> Option<GroundSolid> {
    let g = ground?;
    Some(match platform {
        None => GroundSolid::HalfSpace(g),
        Some(b) => GroundSolid::Platform(Aabb {
            min: b.min,
            max: Vec3::new(b.max.x, b.max.y, g),
        }),
    })
}

impl GroundSolid {
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            GroundSolid::HalfSpace(g) => p.z - g,
            GroundSolid::Platform(b) => {
                let q = (p - b.center()).abs() - b.extent() / 2.0;
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
        }
    }

    /// First hit within `[0, far]`; zero when the origin is inside.
    pub fn hit(&self, origin: &Vec3, dir: &Vec3, far: f64) -> Option<f64> {
        match self {
            GroundSolid::HalfSpace(g) => {
                if origin.z <= *g {
                    Some(0.0)
                } else if dir.z < 0.0 {
                    let t = (g - origin.z) / dir.z;
                    (t <= far).then_some(t)
                } else {
                    None
                }
            }
            GroundSolid::Platform(b) => {
                let ray = Ray {
                    origin: *origin,
                    direction: *dir,
                    pixel: (0.0, 0.0),
                };
                b.intersect(&ray).map(|(t0, _)| t0).filter(|&t| t <= far)
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            GroundSolid::HalfSpace(g) => p.z < *g,
            GroundSolid::Platform(b) => b.contains(p) && p.z < b.max.z,
        }
    }
}

/// Named analytic scenes. Objects are about one unit tall and rest on a
/// ground plane at height zero.
pub fn builtin_scene(name: &str) -> Option<SdfScene> {
    let shapes = match name {
        "cuboid" => vec![Shape::Box {
            center: [0.0, 0.0, 0.4],
            half_extents: [0.45, 0.3, 0.4],
            yaw: 0.35,
        }],
        "vase" => vec![Shape::Lathe {
            base: [0.0, 0.0, 0.0],
            profile: vec![
                [0.0, 0.0],
                [0.25, 0.0],
                [0.33, 0.12],
                [0.4, 0.35],
                [0.38, 0.55],
                [0.24, 0.75],
                [0.17, 0.88],
                [0.24, 1.0],
                [0.0, 1.0],
            ],
        }],
        "chair" => {
            let mut s = vec![
                Shape::Box {
                    center: [0.0, 0.0, 0.45],
                    half_extents: [0.32, 0.32, 0.045],
                    yaw: 0.0,
                },
                Shape::Box {
                    center: [0.0, -0.285, 0.8],
                    half_extents: [0.32, 0.035, 0.31],
                    yaw: 0.0,
                },
            ];
            for (x, y) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                s.push(Shape::Box {
                    center: [0.27 * x, 0.27 * y, 0.2025],
                    half_extents: [0.045, 0.045, 0.2025],
                    yaw: 0.0,
                });
            }
            s
        }
        "bunny" => vec![
            Shape::Sphere {
                center: [0.0, 0.0, 0.36],
                radius: 0.36,
            },
            Shape::Sphere {
                center: [0.3, 0.0, 0.72],
                radius: 0.2,
            },
            Shape::Sphere {
                center: [0.3, 0.1, 0.98],
                radius: 0.08,
            },
            Shape::Sphere {
                center: [0.3, -0.1, 0.98],
                radius: 0.08,
            },
            Shape::Sphere {
                center: [-0.36, 0.0, 0.3],
                radius: 0.1,
            },
        ],
        "sphere" => vec![Shape::Sphere {
            center: [0.0, 0.0, 0.6],
            radius: 0.3,
        }],
        "empty" => vec![],
        _ => return None,
    };
    Some(SdfScene {
        name: name.to_string(),
        shapes,
        ground: Some(0.0),
        platform: None,
    })
}

pub const BUILTIN_SCENES: [&str; 6] = ["cuboid", "vase", "chair", "bunny", "sphere", "empty"];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_distances() {
        let s = Shape::Sphere {
            center: [1.0, 2.0, 3.0],
            radius: 0.5,
        };
        assert_eq!(s.distance(&Vec3::new(1.0, 2.0, 3.0)), -0.5);
        assert!((s.distance(&Vec3::new(2.0, 2.0, 3.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn box_face_center_is_on_surface() {
        let b = Shape::Box {
            center: [0.0; 3],
            half_extents: [0.5; 3],
            yaw: 0.0,
        };
        assert_eq!(b.distance(&Vec3::new(0.5, 0.0, 0.0)), 0.0);
        assert_eq!(b.distance(&Vec3::new(0.0, 0.0, 0.0)), -0.5);
        assert!((b.distance(&Vec3::new(1.5, 1.5, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn yawed_box_bounds_contain_surface() {
        let b = Shape::Box {
            center: [0.1, 0.0, 0.4],
            half_extents: [0.45, 0.3, 0.4],
            yaw: 0.35,
        };
        let bb = b.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..1.5),
            );
            if b.distance(&p) < 0.0 {
                assert!(bb.contains(&p));
            }
        }
    }

    #[test]
    fn lathe_matches_cylinder() {
        let cyl = Shape::Lathe {
            base: [0.0; 3],
            profile: vec![[0.0, 0.0], [0.5, 0.0], [0.5, 1.0], [0.0, 1.0]],
        };
        assert!((cyl.distance(&Vec3::new(0.0, 0.0, 0.5)) + 0.5).abs() < 1e-12);
        assert!((cyl.distance(&Vec3::new(0.0, 0.9, 0.5)) - 0.4).abs() < 1e-12);
        assert!((cyl.distance(&Vec3::new(0.1, 0.0, 1.2)) - 0.2).abs() < 1e-12);
        assert!((cyl.distance(&Vec3::new(0.0, 0.0, 0.95)) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn sdf_is_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in BUILTIN_SCENES {
            let s = builtin_scene(name).unwrap();
            for _ in 0..500 {
                let p = Vec3::new(
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-0.3..1.5),
                );
                let q = p + Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                );
                assert!(
                    (s.distance(&p) - s.distance(&q)).abs() <= (p - q).norm() + 1e-12,
                    "{name}"
                );
            }
        }
    }

    #[test]
    fn ray_at_sphere_center() {
        let s = SdfScene {
            name: "s".into(),
            shapes: vec![Shape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            }],
            ground: None,
            platform: None,
        };
        let o = Vec3::new(0.0, -4.0, 0.0);
        let t = raycast_depth(&s, &o, &Vec3::y(), 10.0).unwrap();
        assert!((t - 3.5).abs() < 1e-4);
        assert!(raycast_depth(&s, &o, &Vec3::x(), 10.0).is_none());
    }

    #[test]
    fn ground_hit_is_analytic() {
        let s = builtin_scene("empty").unwrap();
        let d = Vec3::new(0.0, 0.6, -0.8);
        let t = raycast_depth(&s, &Vec3::new(0.0, 0.0, 2.0), &d, 10.0).unwrap();
        assert!((t - 2.5).abs() < 1e-14);
    }

    #[test]
    fn platform_is_finite() {
        let mut s = builtin_scene("empty").unwrap();
        s.platform =
            Some(Aabb::new(Vec3::new(-1.0, -1.0, -0.2), Vec3::new(1.0, 1.0, 1.0)).unwrap());
        let down = Vec3::new(0.0, 0.0, -1.0);
        assert!(
            (raycast_depth(&s, &Vec3::new(0.5, 0.5, 2.0), &down, 10.0).unwrap() - 2.0).abs()
                < 1e-14
        );
        assert!(raycast_depth(&s, &Vec3::new(1.5, 0.5, 2.0), &down, 10.0).is_none());
        let side = raycast_depth(&s, &Vec3::new(3.0, 0.0, -0.1), &(-Vec3::x()), 10.0).unwrap();
        assert!((side - 2.0).abs() < 1e-14);
        assert!((s.distance(&Vec3::new(0.0, 0.0, 0.5)) - 0.5).abs() < 1e-15);
        assert!((s.distance(&Vec3::new(2.0, 0.0, -0.1)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grazing_rays_never_overshoot() {
        // Compare with a dense march that stops at the first negative sample.
        let s = SdfScene {
            name: "s".into(),
            shapes: vec![Shape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            }],
            ground: None,
            platform: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let off = 0.5 + rng.gen_range(-1e-3..1e-3);
            let o = Vec3::new(off, -3.0, rng.gen_range(-1e-3..1e-3));
            let dir = Vec3::y();
            let dense = (240_000..300_000)
                .map(|i| i as f64 * 1e-5)
                .find(|&t| s.distance(&(o + dir * t)) < 0.0);
            if let Some(t) = raycast_depth(&s, &o, &dir, 10.0) {
                assert!(t >= 3.0 - 0.5 - 1e-4);
                if let Some(td) = dense {
                    assert!(t <= td + 1e-5);
                }
            }
        }
    }
}
