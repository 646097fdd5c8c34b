//! Pinhole cameras, ray generation, range to z-buffer conversion and
//! cross-camera projection of pixel+depth samples.
//!
//! Convention: right-handed camera frame, x right, y up, the camera looks down
//! its local −z axis and image rows grow downward. Poses are stored
//! world←camera. Pixel `(i, j)` has its center at continuous coordinate
//! `(i, j)`, so the default principal point is `((W−1)/2, (H−1)/2)`.
//!
//! A camera using the OpenCV convention (looks down +z, y down) converts by
//! right-multiplying its rotation with `diag(1, −1, −1)`.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::map::Map2;
use crate::Vec3;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub principal: [f64; 2],
    /// Rotation part of the world←camera pose.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (f64, f64),
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        focal: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let principal = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        Self::with_principal(
            width,
            height,
            focal,
            principal,
            rotation,
            translation,
            near,
            far,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_principal(
        width: usize,
        height: usize,
        focal: f64,
        principal: [f64; 2],
        rotation: Matrix3<f64>,
        translation: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            principal,
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel
    /// to the viewing direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let rotation = look_at_rotation(eye, target, up)?;
        Self::new(width, height, focal, rotation, eye, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("camera must have nonzero width and height"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(invalid(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(invalid(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(invalid(format!(
                "rotation is not orthonormal (error {err:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(invalid("rotation must be proper (det = +1)"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("camera translation must be finite"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Unit optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    /// Copy of this camera rendered at a different resolution with the same
    /// field of view.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let scale = width as f64 / self.width as f64;
        let scale_y = height as f64 / self.height as f64;
        if (scale - scale_y).abs() > 1e-12 {
            return Err(invalid("resizing must preserve the aspect ratio"));
        }
        let principal = [
            (self.principal[0] + 0.5) * scale - 0.5,
            (self.principal[1] + 0.5) * scale - 0.5,
        ];
        Self::with_principal(
            width,
            height,
            self.focal * scale,
            principal,
            self.rotation,
            self.translation,
            self.near,
            self.far,
        )
    }

    #[inline]
    pub fn normalized(&self, px: f64, py: f64) -> (f64, f64) {
        (
            (px - self.principal[0]) / self.focal,
            (py - self.principal[1]) / self.focal,
        )
    }

    pub fn contains_pixel(&self, px: f64, py: f64) -> bool {
        px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64
    }

    /// Ray through a continuous pixel coordinate, without bounds checking.
    #[inline]
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let (u, v) = self.normalized(px, py);
        let dir_cam = Vec3::new(u, -v, -1.0);
        let direction = (self.rotation * dir_cam).normalize();
        Ray {
            origin: self.translation,
            direction,
            pixel: (px, py),
        }
    }

    /// Integer pixel centers in row-major order.
    pub fn pixel_grid(&self) -> Vec<(f64, f64)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x as f64, y as f64)))
            .collect()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Project a world point to `(px, py, z)` where `z` is the depth along the
    /// optical axis. Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        let z = -c.z;
        if z <= 0.0 {
            return None;
        }
        Some((
            self.focal * c.x / z + self.principal[0],
            -self.focal * c.y / z + self.principal[1],
            z,
        ))
    }

    /// Inverse of [`Camera::project`].
    pub fn unproject(&self, px: f64, py: f64, z: f64) -> Vec3 {
        let (u, v) = self.normalized(px, py);
        self.camera_to_world(&Vec3::new(u * z, -v * z, -z))
    }

    /// `‖(u, v, 1)·ℰ‖₂` for normalized pixel coordinates and the pose rotation ℰ.
    #[inline]
    pub fn range_scale(&self, px: f64, py: f64) -> f64 {
        let (u, v) = self.normalized(px, py);
        (self.rotation.transpose() * Vec3::new(u, v, 1.0)).norm()
    }

    /// 4×4 map from `(x, y, z, 1)` in the camera frame to homogeneous
    /// pixel+depth `(px·z, py·z, z, 1)`.
    pub fn intrinsic_matrix(&self) -> Matrix4<f64> {
        let [cx, cy] = self.principal;
        let f = self.focal;
        Matrix4::new(
            f, 0.0, -cx, 0.0, //
            0.0, -f, -cy, 0.0, //
            0.0, 0.0, -1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn world_from_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn camera_from_world(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-rt * self.translation));
        m
    }
}

pub fn look_at_rotation(eye: Vec3, target: Vec3, up: Vec3) -> Result<Matrix3<f64>> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(invalid("look-at target coincides with the eye"));
    }
    let forward = forward.normalize();
    let right = forward.cross(&up);
    if right.norm() < 1e-9 {
        return Err(invalid(
            "look-at up vector is parallel to the viewing direction",
        ));
    }
    let right = right.normalize();
    let true_up = right.cross(&forward);
    Ok(Matrix3::from_columns(&[right, true_up, -forward]))
}

pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(px, py)| {
            if !camera.contains_pixel(px, py) {
                return Err(invalid(format!(
                    "pixel ({px}, {py}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            Ok(camera.ray(px, py))
        })
        .collect()
}

/// Convert ray-termination distances into depths along the optical axis:
/// `ẑ = d / ‖(u, v, 1)·ℰ‖₂`.
pub fn range_to_zbuffer(camera: &Camera, range_map: &Map2<f64>) -> Result<Map2<f64>> {
    if range_map.width != camera.width || range_map.height != camera.height {
        return Err(mismatch(
            format!("{}x{}", camera.width, camera.height),
            format!("{}x{}", range_map.width, range_map.height),
        ));
    }
    let mut out = Map2::filled(camera.width, camera.height, 0.0);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let d = *range_map.get(x, y);
            if d < 0.0 {
                return Err(invalid(format!("negative range {d} at ({x}, {y})")));
            }
            *out.get_mut(x, y) = d / camera.range_scale(x as f64, y as f64);
        }
    }
    Ok(out)
}

/// Homogeneous transform taking `(px·z, py·z, z, 1)` in a source camera to the
/// same quantity in a target camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrix: Matrix4<f64>,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPixel {
    /// Pixel coordinates in the target, clamped to `[0, W−1]×[0, H−1]`.
    pub u: f64,
    pub v: f64,
    /// Depth along the target's optical axis (never clamped).
    pub depth: f64,
    /// `∂depth/∂z_source`, the only derivative carried through projection.
    pub depth_grad: f64,
    /// False when the point lies at or behind the target camera plane.
    pub valid: bool,
}

impl Projection {
    pub fn between(src: &Camera, dst: &Camera) -> Result<Self> {
        let k_src = src.intrinsic_matrix();
        let k_inv = k_src
            .try_inverse()
            .ok_or_else(|| invalid("source intrinsics are singular"))?;
        // Identical cameras map every pixel onto itself; skip the composition
        // so that rounding cannot leak into self-comparisons.
        let matrix = if src == dst {
            Matrix4::identity()
        } else {
            dst.intrinsic_matrix() * dst.camera_from_world() * src.world_from_camera() * k_inv
        };
        Ok(Self {
            matrix,
            source: "source".into(),
            target: "target".into(),
        })
    }

    pub fn with_labels(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source = source.into();
        self.target = target.into();
        self
    }

    pub fn inverse(&self) -> Option<Self> {
        Some(Self {
            matrix: self.matrix.try_inverse()?,
            source: self.target.clone(),
            target: self.source.clone(),
        })
    }

    /// Raw (unclamped) target pixel and depth.
    #[inline]
    pub fn apply(&self, u: f64, v: f64, z: f64) -> (f64, f64, f64) {
        let h = self.matrix * Vector4::new(u * z, v * z, z, 1.0);
        (h[0] / h[2], h[1] / h[2], h[2])
    }

    #[inline]
    pub fn project_clamped(
        &self,
        u: f64,
        v: f64,
        z: f64,
        width: usize,
        height: usize,
    ) -> ProjectedPixel {
        let dir = self.matrix * Vector4::new(u, v, 1.0, 0.0);
        let h = dir * z + self.matrix.column(3);
        let depth = h[2];
        let valid = depth > 1e-12;
        let (ru, rv) = if valid {
            (h[0] / depth, h[1] / depth)
        } else {
            (0.0, 0.0)
        };
        let clamp = |x: f64, hi: usize| {
            if x.is_nan() {
                0.0
            } else {
                x.clamp(0.0, (hi - 1) as f64)
            }
        };
        ProjectedPixel {
            u: clamp(ru, width),
            v: clamp(rv, height),
            depth,
            depth_grad: dir[2],
            valid,
        }
    }
}

/// Unproject pixel+depth samples through `src` and reproject them into `dst`,
/// clamping pixel coordinates to the target image.
pub fn project_pixels(
    src: &Camera,
    dst: &Camera,
    pixels: &[(f64, f64)],
    depths: &[f64],
) -> Result<Vec<ProjectedPixel>> {
    if pixels.len() != depths.len() {
        return Err(mismatch(pixels.len(), depths.len()));
    }
    let proj = Projection::between(src, dst)?;
    pixels
        .iter()
        .zip(depths)
        .map(|(&(u, v), &z)| {
            if !(z > 0.0) {
                return Err(invalid(format!(
                    "nonpositive depth {z} at pixel ({u}, {v})"
                )));
            }
            Ok(proj.project_clamped(u, v, z, dst.width, dst.height))
        })
        .collect()
}

/// One record of the pose file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub principal: [f64; 2],
    pub near: f64,
    pub far: f64,
    /// Row-major 4×4 world←camera matrix.
    pub world_from_camera: Vec<f64>,
    #[serde(default)]
    pub light: bool,
}

impl PoseRecord {
    pub fn from_camera(id: impl Into<String>, camera: &Camera, light: bool) -> Self {
        let m = camera.world_from_camera();
        let mut flat = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                flat.push(m[(r, c)]);
            }
        }
        Self {
            id: id.into(),
            width: camera.width,
            height: camera.height,
            focal: camera.focal,
            principal: camera.principal,
            near: camera.near,
            far: camera.far,
            world_from_camera: flat,
            light,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        if self.world_from_camera.len() != 16 {
            return Err(mismatch(16, self.world_from_camera.len()));
        }
        let m = Matrix4::from_row_slice(&self.world_from_camera);
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        Camera::with_principal(
            self.width,
            self.height,
            self.focal,
            self.principal,
            rotation,
            translation,
            self.near,
            self.far,
        )
    }
}

/// Cameras plus exactly one light from a pose file.
#[derive(Debug, Clone)]
pub struct PoseSet {
    pub cameras: Vec<(String, Camera)>,
    pub light: (String, Camera),
}

impl PoseSet {
    pub fn from_records(records: &[PoseRecord]) -> Result<Self> {
        let mut cameras = Vec::new();
        let mut light = None;
        for rec in records {
            let cam = rec.to_camera()?;
            if rec.light {
                if light.is_some() {
                    return Err(invalid("pose file contains more than one light"));
                }
                light = Some((rec.id.clone(), cam));
            } else {
                cameras.push((rec.id.clone(), cam));
            }
        }
        let light = light.ok_or_else(|| invalid("pose file has no light record"))?;
        Ok(Self { cameras, light })
    }

    pub fn to_records(&self) -> Vec<PoseRecord> {
        let mut out: Vec<_> = self
            .cameras
            .iter()
            .map(|(id, c)| PoseRecord::from_camera(id.clone(), c, false))
            .collect();
        out.push(PoseRecord::from_camera(
            self.light.0.clone(),
            &self.light.1,
            true,
        ));
        out
    }
}

/// Axis-aligned box, serialized as `[x0, y0, z0, x1, y1, z1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|i| min[i] < max[i] && min[i].is_finite() && max[i].is_finite()) {
            return Err(invalid(format!("degenerate bounds {min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Parametric interval where a ray is inside the box, if any.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / ray.direction[i];
            let mut a = (self.min[i] - ray.origin[i]) * inv;
            let mut b = (self.max[i] - ray.origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a.is_nan() || b.is_nan() {
                // Ray parallel to the slab with origin on its boundary.
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1 && t1 >= 0.0).then_some((t0.max(0.0), t1))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }
}

impl TryFrom<[f64; 6]> for Aabb {
    type Error = crate::Error;

    fn try_from(v: [f64; 6]) -> Result<Self> {
        Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }
}

impl From<Aabb> for [f64; 6] {
    fn from(b: Aabb) -> Self {
        [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]
    }
}

impl std::str::FromStr for Aabb {
    type Err = crate::Error;

    /// Parses `"x0,y0,z0,x1,y1,z1"`.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("bad bounds '{s}': {e}")))?;
        let arr: [f64; 6] = vals
            .try_into()
            .map_err(|_| invalid(format!("bounds need 6 numbers, got '{s}'")))?;
        Aabb::try_from(arr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn identity_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(w, h, f, Matrix3::identity(), Vec3::zeros(), 0.1, 100.0).unwrap()
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = identity_camera(64, 48, 50.0);
        let rays = generate_rays(&cam, &[(cam.principal[0], cam.principal[1])]).unwrap();
        assert!((rays[0].direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!((cam.optical_axis() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn full_grid_yields_unit_rays() {
        let cam = identity_camera(16, 12, 20.0);
        let rays = generate_rays(&cam, &cam.pixel_grid()).unwrap();
        assert_eq!(rays.len(), 16 * 12);
        for r in rays {
            assert!((r.direction.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_one_focal_right_is_45_degrees() {
        let f = 40.0;
        let cam = identity_camera(128, 128, f);
        let px = cam.principal[0] + f;
        let ray = cam.ray(px, cam.principal[1]);
        let angle = ray.direction.dot(&cam.optical_axis()).acos();
        assert!((angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // Explicit trigonometry: tan(angle) = x / z on the image plane.
        assert!((ray.direction.x / -ray.direction.z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let cam = identity_camera(8, 8, 10.0);
        assert!(generate_rays(&cam, &[(8.0, 0.0)]).is_err());
        assert!(generate_rays(&cam, &[(-0.1, 0.0)]).is_err());
    }

    #[test]
    fn camera_invariants_enforced() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(4, 4, 1.0, bad_rot, Vec3::zeros(), 0.1, 1.0).is_err());
        assert!(Camera::new(4, 4, 0.0, Matrix3::identity(), Vec3::zeros(), 0.1, 1.0).is_err());
        assert!(Camera::new(4, 4, 1.0, Matrix3::identity(), Vec3::zeros(), 1.0, 0.5).is_err());
        assert!(Camera::new(4, 4, 1.0, Matrix3::identity(), Vec3::zeros(), 0.0, 0.5).is_err());
    }

    #[test]
    fn zbuffer_on_axis_and_off_axis() {
        // 3x1 image with principal (1, 0) and focal 1: pixel 2 has u = 1.
        let cam = Camera::with_principal(
            3,
            1,
            1.0,
            [1.0, 0.0],
            Matrix3::identity(),
            Vec3::zeros(),
            0.1,
            10.0,
        )
        .unwrap();
        let ranges = Map2::from_vec(3, 1, vec![0.0, 5.0, 3.0]).unwrap();
        let z = range_to_zbuffer(&cam, &ranges).unwrap();
        assert_eq!(z.data[0], 0.0);
        assert_eq!(z.data[1], 5.0);
        assert!((z.data[2] - 3.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zbuffer_dimension_mismatch() {
        let cam = identity_camera(4, 4, 2.0);
        let ranges = Map2::filled(3, 4, 1.0);
        assert!(matches!(
            range_to_zbuffer(&cam, &ranges),
            Err(crate::Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_projection() {
        let cam = Camera::look_at(
            32,
            32,
            30.0,
            Vec3::new(1.0, 2.0, 5.0),
            Vec3::zeros(),
            Vec3::z(),
            0.1,
            20.0,
        )
        .unwrap();
        let out = project_pixels(&cam, &cam, &[(3.5, 20.25)], &[4.0]).unwrap();
        assert!((out[0].u - 3.5).abs() < 1e-6);
        assert!((out[0].v - 20.25).abs() < 1e-6);
        assert!((out[0].depth - 4.0).abs() < 1e-6);
        assert!(out[0].valid);
    }

    #[test]
    fn projection_between_orthogonal_views() {
        let src = Camera::look_at(
            33,
            33,
            20.0,
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::zeros(),
            Vec3::y(),
            0.1,
            20.0,
        )
        .unwrap();
        let dst = Camera::look_at(
            33,
            33,
            20.0,
            Vec3::new(5.0, 0.0, 0.0),
            Vec3::zeros(),
            Vec3::z(),
            0.1,
            20.0,
        )
        .unwrap();
        // World origin sits on src's principal ray at depth 5.
        let out = project_pixels(&src, &dst, &[(16.0, 16.0)], &[5.0]).unwrap();
        assert!((out[0].u - dst.principal[0]).abs() < 1e-9);
        assert!((out[0].v - dst.principal[1]).abs() < 1e-9);
        assert!((out[0].depth - 5.0).abs() < 1e-9);
    }

    #[test]
    fn projection_clamps_pixels_not_depth() {
        let cam = identity_camera(8, 8, 4.0);
        let proj = Projection::between(&cam, &cam).unwrap();
        let p = proj.project_clamped(-3.2, 10.7, 2.0, 8, 8);
        assert_eq!((p.u, p.v), (0.0, 7.0));
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn behind_target_is_flagged() {
        let src = identity_camera(8, 8, 4.0);
        let dst = Camera::look_at(
            8,
            8,
            4.0,
            Vec3::new(0.0, 0.0, -10.0),
            Vec3::new(0.0, 0.0, -20.0),
            Vec3::y(),
            0.1,
            50.0,
        )
        .unwrap();
        let out = project_pixels(&src, &dst, &[(3.5, 3.5)], &[2.0]).unwrap();
        assert!(!out[0].valid);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let cam = identity_camera(8, 8, 4.0);
        assert!(project_pixels(&cam, &cam, &[(1.0, 1.0)], &[0.0]).is_err());
    }

    #[test]
    fn pose_record_round_trip() {
        let cam = Camera::look_at(
            16,
            8,
            12.0,
            Vec3::new(1.0, -2.0, 3.0),
            Vec3::zeros(),
            Vec3::z(),
            0.5,
            9.0,
        )
        .unwrap();
        let rec = PoseRecord::from_camera("c0", &cam, false);
        let json = serde_json::to_string(&rec).unwrap();
        let back: PoseRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_camera().unwrap(), cam);
    }

    #[test]
    fn pose_set_requires_one_light() {
        let cam = identity_camera(4, 4, 2.0);
        let recs = vec![PoseRecord::from_camera("a", &cam, false)];
        assert!(PoseSet::from_records(&recs).is_err());
        let recs = vec![
            PoseRecord::from_camera("a", &cam, true),
            PoseRecord::from_camera("b", &cam, true),
        ];
        assert!(PoseSet::from_records(&recs).is_err());
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0)
            .prop_map(|(a, b, c)| *nalgebra::Rotation3::from_euler_angles(a, b, c).matrix())
    }

    fn arb_camera() -> impl Strategy<Value = Camera> {
        (
            arb_rotation(),
            -5.0f64..5.0,
            -5.0f64..5.0,
            -5.0f64..5.0,
            10.0f64..80.0,
        )
            .prop_map(|(r, x, y, z, f)| {
                Camera::new(32, 24, f, r, Vec3::new(x, y, z), 0.1, 50.0).unwrap()
            })
    }

    proptest! {
        #[test]
        fn unproject_reproject_is_identity(cam in arb_camera(), u in 0.0f64..32.0, v in 0.0f64..24.0, z in 0.2f64..40.0) {
            let p = cam.unproject(u, v, z);
            let (u2, v2, z2) = cam.project(&p).unwrap();
            prop_assert!(close(u, u2, 1e-6) && close(v, v2, 1e-6) && close(z, z2, 1e-6));
        }

        #[test]
        fn zbuffer_inverse_recovers_range(rot in arb_rotation(), u in 0.0f64..32.0, v in 0.0f64..24.0, d in 0.0f64..40.0) {
            let cam = Camera::new(32, 24, 17.0, rot, Vec3::zeros(), 0.1, 50.0).unwrap();
            let z = d / cam.range_scale(u, v);
            prop_assert!((z * cam.range_scale(u, v) - d).abs() <= 1e-9 * (1.0 + d));
            prop_assert!(z <= d + 1e-12);
        }

        #[test]
        fn on_axis_scale_is_one(rot in arb_rotation()) {
            let cam = Camera::new(32, 24, 17.0, rot, Vec3::zeros(), 0.1, 50.0).unwrap();
            let s = cam.range_scale(cam.principal[0], cam.principal[1]);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn src_dst_src_round_trip(a in arb_camera(), u in 4.0f64..28.0, v in 4.0f64..20.0, z in 1.0f64..10.0) {
            let b = Camera::look_at(64, 64, 40.0, a.unproject(16.0, 12.0, 5.0) + Vec3::new(3.0, 1.0, 2.0),
                a.unproject(16.0, 12.0, 5.0), Vec3::new(0.3, 0.2, 1.0), 0.1, 50.0).unwrap();
            let fwd = Projection::between(&a, &b).unwrap();
            let (bu, bv, bz) = fwd.apply(u, v, z);
            prop_assume!(bz > 0.0 && bu >= 0.0 && bv >= 0.0 && bu <= 63.0 && bv <= 63.0);
            let back = project_pixels(&b, &a, &[(bu, bv)], &[bz]).unwrap()[0];
            prop_assert!((back.u - u).abs() < 1e-5 && (back.v - v).abs() < 1e-5);
        }

        #[test]
        fn projection_inverse_round_trip(a in arb_camera(), u in 0.0f64..32.0, v in 0.0f64..24.0, z in 0.5f64..10.0) {
            let b = Camera::look_at(32, 24, 25.0, Vec3::new(7.0, 1.0, 3.0), Vec3::zeros(), Vec3::z(), 0.1, 50.0).unwrap();
            let p = Projection::between(&a, &b).unwrap();
            let inv = p.inverse().unwrap();
            let (bu, bv, bz) = p.apply(u, v, z);
            prop_assume!(bz.abs() > 1e-3);
            let (u2, v2, z2) = inv.apply(bu, bv, bz);
            prop_assert!(close(u, u2, 1e-6) && close(v, v2, 1e-6) && close(z, z2, 1e-6));
        }
    }
}
