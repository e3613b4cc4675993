//! World frame, parallel-beam view geometry and rays.
//!
//! Axis convention, used everywhere in the crate:
//!
//! * `z` is the vertical rotation axis.
//! * At angle 0 the beam travels along `+y`; the detector column axis `u`
//!   is `+x` and the detector row axis `v` is `+z`.
//! * A view at angle `θ` rotates beam and detector by `θ` about `+z`, so the
//!   beam direction is `(-sin θ, cos θ, 0)` and the `u` axis is
//!   `(cos θ, sin θ, 0)`.
//! * The detector is centered on the rotation axis. Detector coordinates are
//!   measured in pixels: pixel `(i, j)` covers `u ∈ [j, j+1)`,
//!   `v ∈ [i, i+1)`, so its center is at `(j + 0.5, i + 0.5)` and the world
//!   origin lands on `(W/2, H/2)`. Row 0 is stored first.
//! * `depth` is the signed distance (meters) along the beam from the plane
//!   through the world origin.

use std::f64::consts::TAU;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::InvalidConfig(format!(
                "box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p.get(a) >= self.min.get(a) && p.get(a) <= self.max.get(a))
    }

    /// Largest distance from the world origin to any corner.
    pub fn bounding_radius(&self) -> f64 {
        let fx = self.min.x.abs().max(self.max.x.abs());
        let fy = self.min.y.abs().max(self.max.y.abs());
        let fz = self.min.z.abs().max(self.max.z.abs());
        Vec3::new(fx, fy, fz).norm()
    }
}

/// Voxel grid: `dims = [nx, ny, nz]`, cubic voxels, `origin` is the world
/// position of the center of voxel `(0, 0, 0)`.
///
/// Linear voxel index is `(iz * ny + iy) * nx + ix`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3) -> Result<Self> {
        let g = GridSpec {
            dims,
            voxel_size,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose bounding box is centered on the world origin.
    pub fn centered(dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        let half = |n: usize| -(n as f64 - 1.0) * 0.5 * voxel_size;
        GridSpec::new(
            dims,
            voxel_size,
            Vec3::new(half(dims[0]), half(dims[1]), half(dims[2])),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "grid dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "voxel size must be > 0, got {}",
                self.voxel_size
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        self.origin + Vec3::new(ix as f64, iy as f64, iz as f64) * self.voxel_size
    }

    /// World point to continuous voxel-index coordinates (voxel centers at
    /// integers).
    pub fn to_index_coords(&self, p: Vec3) -> Vec3 {
        (p - self.origin) * (1.0 / self.voxel_size)
    }

    pub fn bounds(&self) -> Aabb {
        let h = self.voxel_size * 0.5;
        let ext = |a: usize| (self.dims[a] as f64 - 0.5) * self.voxel_size;
        Aabb {
            min: self.origin - Vec3::new(h, h, h),
            max: self.origin + Vec3::new(ext(0), ext(1), ext(2)),
        }
    }

    pub fn center(&self) -> Vec3 {
        let b = self.bounds();
        (b.min + b.max) * 0.5
    }

    /// Iterates voxel centers in linear-index order.
    pub fn voxel_centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |iz| {
            (0..ny).flat_map(move |iy| (0..nx).map(move |ix| self.voxel_center(ix, iy, iz)))
        })
    }
}

/// Parametrized line `r(t) = origin + t·direction`, `direction` unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalized(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Detector-frame coordinates of a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewCoords {
    /// Column coordinate, pixels.
    pub u: f64,
    /// Row coordinate, pixels.
    pub v: f64,
    /// Signed distance along the beam, meters.
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    /// Rotation about `+z`, radians, normalized to `[0, 2π)`.
    pub angle: f64,
    /// `(rows, cols)` = `(H, W)`.
    pub detector_dims: (usize, usize),
    pub pixel_size: f64,
    pub view_index: usize,
}

impl ViewGeometry {
    pub fn new(
        angle: f64,
        detector_dims: (usize, usize),
        pixel_size: f64,
        view_index: usize,
    ) -> Result<Self> {
        if detector_dims.0 == 0 || detector_dims.1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "detector dims must be >= 1, got {detector_dims:?}"
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::Degenerate(format!("pixel size {pixel_size}")));
        }
        Ok(ViewGeometry {
            angle: angle.rem_euclid(TAU),
            detector_dims,
            pixel_size,
            view_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.detector_dims.0
    }

    pub fn cols(&self) -> usize {
        self.detector_dims.1
    }

    pub fn beam_direction(&self) -> Vec3 {
        let (s, c) = self.angle.sin_cos();
        Vec3::new(-s, c, 0.0)
    }

    pub fn u_axis(&self) -> Vec3 {
        let (s, c) = self.angle.sin_cos();
        Vec3::new(c, s, 0.0)
    }

    pub fn v_axis(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn world_to_view(&self, x: Vec3) -> ViewCoords {
        let (h, w) = self.detector_dims;
        ViewCoords {
            u: x.dot(self.u_axis()) / self.pixel_size + w as f64 * 0.5,
            v: x.dot(self.v_axis()) / self.pixel_size + h as f64 * 0.5,
            depth: x.dot(self.beam_direction()),
        }
    }

    pub fn view_to_world(&self, c: ViewCoords) -> Vec3 {
        let (h, w) = self.detector_dims;
        self.u_axis() * ((c.u - w as f64 * 0.5) * self.pixel_size)
            + self.v_axis() * ((c.v - h as f64 * 0.5) * self.pixel_size)
            + self.beam_direction() * c.depth
    }

    /// Ray through the center of pixel `(row, col)`.
    ///
    /// The origin sits upstream of `bounds`, so every point of the box has
    /// `t > 0` along the returned ray.
    pub fn ray_for_pixel(&self, row: usize, col: usize, bounds: &Aabb) -> Result<Ray> {
        let (h, w) = self.detector_dims;
        if row >= h || col >= w {
            return Err(Error::PixelOutOfRange {
                row,
                col,
                rows: h,
                cols: w,
            });
        }
        let on_plane = self.view_to_world(ViewCoords {
            u: col as f64 + 0.5,
            v: row as f64 + 0.5,
            depth: 0.0,
        });
        let r = bounds.bounding_radius();
        let standoff = r + (r * 1e-3).max(1e-12);
        let d = self.beam_direction();
        Ok(Ray {
            origin: on_plane - d * standoff,
            direction: d,
        })
    }
}

/// Slab-method intersection; `None` when the ray misses the box.
///
/// The returned interval may start at negative `t` if the origin lies
/// inside the box.
pub fn ray_aabb_intersect(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin.get(axis);
        let d = ray.direction.get(axis);
        let (lo, hi) = (b.min.get(axis), b.max.get(axis));
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - o) / d, (hi - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    Some((t_near, t_far))
}
