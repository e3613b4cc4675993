//! Synthetic phantoms: void ellipsoids inside a solid cylinder.
//!
//! Phantom geometry is expressed in *voxel units* in the world frame: a
//! point `p` (voxel units) sits at `p · voxel_size` meters. The cylinder axis
//! is the world `z` axis (the rotation axis of every view) and the cylinder
//! is centered at `z = 0`.
//!
//! Ellipsoids are axis-aligned. Their centers are drawn uniformly inside the
//! cylinder; they may overlap each other and protrude through the wall.
//!
//! Besides the voxel volume, [`analytic_line_integrals`] gives the exact
//! `∫δ dz`, `∫β dz` of the continuous phantom along any ray. That is the
//! oracle the projector is checked against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Ray, Vec3};
use crate::physics::Material;
use crate::rng;
use crate::volume::RefractiveVolume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    /// Center, voxel units.
    pub center: [f64; 3],
    /// Semi-axes along x, y, z, voxel units.
    pub semi_axes: [f64; 3],
}

impl EllipsoidSpec {
    pub fn contains(&self, p: Vec3) -> bool {
        let q = [
            (p.x - self.center[0]) / self.semi_axes[0],
            (p.y - self.center[1]) / self.semi_axes[1],
            (p.z - self.center[2]) / self.semi_axes[2],
        ];
        q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
    }

    /// Parameter interval (voxel units) where the ray is inside.
    fn chord(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let o = [
            (origin.x - self.center[0]) / self.semi_axes[0],
            (origin.y - self.center[1]) / self.semi_axes[1],
            (origin.z - self.center[2]) / self.semi_axes[2],
        ];
        let d = [
            dir.x / self.semi_axes[0],
            dir.y / self.semi_axes[1],
            dir.z / self.semi_axes[2],
        ];
        let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let b = 2.0 * (o[0] * d[0] + o[1] * d[1] + o[2] * d[2]);
        let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - 1.0;
        quadratic_interval(a, b, c)
    }
}

/// Finite solid cylinder around the world `z` axis, voxel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub radius: f64,
    pub height: f64,
}

impl Cylinder {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x * p.x + p.y * p.y <= self.radius * self.radius && p.z.abs() <= 0.5 * self.height
    }

    fn chord(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let a = dir.x * dir.x + dir.y * dir.y;
        let (mut t0, mut t1) = if a == 0.0 {
            // Parallel to the axis.
            if origin.x * origin.x + origin.y * origin.y > self.radius * self.radius {
                return None;
            }
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            let b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
            let c = origin.x * origin.x + origin.y * origin.y - self.radius * self.radius;
            quadratic_interval(a, b, c)?
        };
        let hz = 0.5 * self.height;
        if dir.z == 0.0 {
            if origin.z.abs() > hz {
                return None;
            }
        } else {
            let (mut z0, mut z1) = ((-hz - origin.z) / dir.z, (hz - origin.z) / dir.z);
            if z0 > z1 {
                std::mem::swap(&mut z0, &mut z1);
            }
            t0 = t0.max(z0);
            t1 = t1.min(z1);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Roots of `a t² + b t + c = 0` as an interval, `None` without two real
/// roots.
fn quadratic_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable root pair.
    let q = -0.5 * (b + b.signum() * sq);
    let (r0, r1) = if q == 0.0 {
        (-sq / (2.0 * a), sq / (2.0 * a))
    } else {
        (q / a, c / q)
    };
    Some((r0.min(r1), r0.max(r1)))
}

/// How voxel values are assigned from the continuous phantom.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voxelization {
    /// Material iff the voxel center is inside the solid: exactly two levels.
    #[default]
    Binary,
    /// Fraction of `n³` sub-samples inside the solid (partial volume).
    Supersampled(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    /// Voxel units.
    pub cylinder_radius: f64,
    /// Voxel units.
    pub cylinder_height: f64,
    /// Inclusive range of ellipsoid counts.
    pub ellipsoid_count: (usize, usize),
    /// Inclusive range for each semi-axis, voxel units.
    pub semi_axis_range: (f64, f64),
    pub material: Material,
    #[serde(default)]
    pub voxelization: Voxelization,
    pub seed: u64,
}

impl PhantomSpec {
    /// 64³ voxels of 3.2 µm, cylinder diameter 25 voxels, 5–10 voids with
    /// semi-axes 5–20 voxels (the full-scale geometry shrunk by 1/4).
    pub fn desk() -> Self {
        Self::scaled(64, 25.0 / 100.0)
    }

    /// 256³ voxels, cylinder diameter 100 and height 256 voxels, semi-axes
    /// 20–80 voxels.
    pub fn full_scale() -> Self {
        let mut s = Self::scaled(256, 1.0);
        s.cylinder_height = 256.0;
        s
    }

    /// Cube of `n` voxels with the full-scale cylinder and ellipsoid sizes
    /// multiplied by `scale`; the cylinder spans the whole grid height.
    pub fn scaled(n: usize, scale: f64) -> Self {
        PhantomSpec {
            grid: GridSpec::centered([n, n, n], 3.2e-6).expect("static grid"),
            cylinder_radius: 50.0 * scale,
            cylinder_height: n as f64,
            ellipsoid_count: (5, 10),
            semi_axis_range: (20.0 * scale, 80.0 * scale),
            material: Material::aluminum_18kev(),
            voxelization: Voxelization::Binary,
            seed: 0,
        }
    }

    pub fn cylinder(&self) -> Cylinder {
        Cylinder {
            radius: self.cylinder_radius,
            height: self.cylinder_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.cylinder_radius > 0.0 && self.cylinder_height > 0.0) {
            return bad("cylinder radius and height must be positive".into());
        }
        let b = self.grid.bounds();
        let s = self.grid.voxel_size;
        let (r, hz) = (self.cylinder_radius * s, 0.5 * self.cylinder_height * s);
        let tol = 1e-9 * s;
        if b.min.x > -r + tol
            || b.max.x < r - tol
            || b.min.y > -r + tol
            || b.max.y < r - tol
            || b.min.z > -hz + tol
            || b.max.z < hz - tol
        {
            return bad(format!(
                "cylinder (radius {}, height {} voxels) does not fit in grid {:?}",
                self.cylinder_radius, self.cylinder_height, self.grid.dims
            ));
        }
        let (lo, hi) = self.ellipsoid_count;
        if lo > hi {
            return bad(format!("ellipsoid count range ({lo}, {hi}) is empty"));
        }
        let (a, bb) = self.semi_axis_range;
        if !(a > 0.0 && a <= bb) {
            return bad(format!("semi-axis range ({a}, {bb}) invalid"));
        }
        if !self.material.is_valid() {
            return bad(format!("material {:?} invalid", self.material));
        }
        if let Voxelization::Supersampled(0) = self.voxelization {
            return bad("supersampling factor must be >= 1".into());
        }
        Ok(())
    }
}

/// A generated phantom: its voxel volume plus the exact description.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: RefractiveVolume,
    pub ellipsoids: Vec<EllipsoidSpec>,
    pub cylinder: Cylinder,
    pub material: Material,
}

impl Phantom {
    /// Exact line integrals of this phantom; see [`analytic_line_integrals`].
    pub fn line_integrals(&self, ray: &Ray) -> (f64, f64) {
        analytic_line_integrals(
            &self.ellipsoids,
            &self.cylinder,
            &self.material,
            self.volume.grid.voxel_size,
            ray,
        )
    }

    /// Whether a point (voxel units) holds material.
    pub fn is_solid(&self, p: Vec3) -> bool {
        self.cylinder.contains(p) && !self.ellipsoids.iter().any(|e| e.contains(p))
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let (lo, hi) = spec.ellipsoid_count;
    let count = rng.random_range(lo..=hi);
    let (amin, amax) = spec.semi_axis_range;
    let r = spec.cylinder_radius;
    let hz = 0.5 * spec.cylinder_height;
    let ellipsoids: Vec<EllipsoidSpec> = (0..count)
        .map(|_| {
            let rad = r * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(-hz..=hz);
            let mut semi = [0.0; 3];
            for s in &mut semi {
                *s = rng.random_range(amin..=amax);
            }
            EllipsoidSpec {
                center: [rad * phi.cos(), rad * phi.sin(), z],
                semi_axes: semi,
            }
        })
        .collect();

    let mut phantom = Phantom {
        volume: RefractiveVolume::zeros(spec.grid),
        ellipsoids,
        cylinder: spec.cylinder(),
        material: spec.material,
    };
    let grid = spec.grid;
    let inv = 1.0 / grid.voxel_size;
    let offsets: Vec<f64> = match spec.voxelization {
        Voxelization::Binary => vec![0.0],
        Voxelization::Supersampled(n) => (0..n)
            .map(|k| (k as f64 + 0.5) / n as f64 - 0.5)
            .collect(),
    };
    let per_voxel = (offsets.len() as f64).powi(3);
    let mut fill = vec![0.0; grid.len()];
    for (i, c) in grid.voxel_centers().enumerate() {
        let c = c * inv;
        let mut inside = 0usize;
        for &ox in &offsets {
            for &oy in &offsets {
                for &oz in &offsets {
                    if phantom.is_solid(c + Vec3::new(ox, oy, oz)) {
                        inside += 1;
                    }
                }
            }
        }
        fill[i] = inside as f64 / per_voxel;
    }
    let m = spec.material;
    phantom.volume.delta = fill.iter().map(|f| f * m.delta).collect();
    phantom.volume.beta = fill.iter().map(|f| f * m.beta).collect();
    Ok(phantom)
}

/// Exact `(∫δ dz, ∫β dz)` along a ray (meters × index units).
///
/// The material occupies the cylinder chord minus the union of all
/// ellipsoid chords; overlapping voids are merged before subtracting.
pub fn analytic_line_integrals(
    ellipsoids: &[EllipsoidSpec],
    cylinder: &Cylinder,
    material: &Material,
    voxel_size: f64,
    ray: &Ray,
) -> (f64, f64) {
    let o = ray.origin * (1.0 / voxel_size);
    let d = ray.direction;
    let Some((c0, c1)) = cylinder.chord(o, d) else {
        return (0.0, 0.0);
    };
    let mut voids: Vec<(f64, f64)> = ellipsoids
        .iter()
        .filter_map(|e| e.chord(o, d))
        .filter_map(|(a, b)| {
            let (a, b) = (a.max(c0), b.min(c1));
            (b > a).then_some((a, b))
        })
        .collect();
    voids.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut void_len = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (a, b) in voids {
        current = match current {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                void_len += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = current {
        void_len += e - s;
    }
    let length = ((c1 - c0) - void_len).max(0.0) * voxel_size;
    (material.delta * length, material.beta * length)
}

/// Streams `n_objects` phantoms; object `k` uses seed
/// [`rng::derive_seed`]`(seed, k)`.
pub fn generate_dataset(
    n_objects: usize,
    template: &PhantomSpec,
    seed: u64,
) -> impl Iterator<Item = Result<Phantom>> + '_ {
    (0..n_objects).map(move |k| {
        let mut spec = template.clone();
        spec.seed = rng::derive_seed(seed, k as u64);
        generate_phantom(&spec)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn small_spec(count: (usize, usize)) -> PhantomSpec {
        let mut s = PhantomSpec::scaled(32, 0.125);
        s.ellipsoid_count = count;
        s
    }

    #[test]
    fn empty_phantom_is_uniform_cylinder() {
        let p = generate_phantom(&small_spec((0, 0))).unwrap();
        assert!(p.ellipsoids.is_empty());
        let g = p.volume.grid;
        for (i, c) in g.voxel_centers().enumerate() {
            let expect = if p.cylinder.contains(c * (1.0 / g.voxel_size)) {
                1.6741e-7
            } else {
                0.0
            };
            assert_eq!(p.volume.delta[i], expect);
        }
    }

    #[test]
    fn void_at_ellipsoid_center() {
        let p = generate_phantom(&small_spec((5, 10))).unwrap();
        let g = p.volume.grid;
        for e in &p.ellipsoids {
            // Nearest voxel to the center; semi-axes >= 2.5 voxels so it is
            // inside the ellipsoid.
            let idx = g.to_index_coords(Vec3::from_array(e.center) * g.voxel_size);
            let (ix, iy, iz) = (
                idx.x.round() as usize,
                idx.y.round() as usize,
                idx.z.round().clamp(0.0, 31.0) as usize,
            );
            let i = g.index(ix, iy, iz);
            assert_eq!((p.volume.delta[i], p.volume.beta[i]), (0.0, 0.0));
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let mut s = small_spec((5, 10));
        let a = generate_phantom(&s).unwrap();
        let b = generate_phantom(&s).unwrap();
        assert_eq!(a.volume, b.volume);
        s.seed = 1;
        let c = generate_phantom(&s).unwrap();
        assert_ne!(a.ellipsoids, c.ellipsoids);
    }

    #[test]
    fn cylinder_must_fit() {
        let mut s = small_spec((0, 0));
        s.cylinder_radius = 17.0;
        assert!(matches!(generate_phantom(&s), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn binary_histogram_has_two_levels() {
        let p = generate_phantom(&small_spec((5, 10))).unwrap();
        let mut levels: Vec<f64> = p.volume.delta.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        assert_eq!(levels, vec![0.0, 1.6741e-7]);
    }

    #[test]
    fn void_fraction_positive() {
        for seed in 0..5 {
            let mut s = small_spec((5, 10));
            s.seed = seed;
            let p = generate_phantom(&s).unwrap();
            let g = p.volume.grid;
            let inside: Vec<usize> = g
                .voxel_centers()
                .enumerate()
                .filter(|(_, c)| p.cylinder.contains(*c * (1.0 / g.voxel_size)))
                .map(|(i, _)| i)
                .collect();
            let voids = inside.iter().filter(|&&i| p.volume.delta[i] == 0.0).count();
            assert!(voids > 0, "seed {seed}");
        }
    }

    #[test]
    fn supersampled_values_stay_between_levels() {
        let mut s = small_spec((5, 10));
        s.voxelization = Voxelization::Supersampled(3);
        let p = generate_phantom(&s).unwrap();
        assert!(p
            .volume
            .beta
            .iter()
            .all(|&b| (0.0..=6.4088e-9 * (1.0 + 1e-12)).contains(&b)));
        assert!(p.volume.beta.iter().any(|&b| b > 0.0 && b < 6.4088e-9));
    }

    #[test]
    fn chord_through_center() {
        let s = 3.2e-6;
        let cyl = Cylinder {
            radius: 12.5,
            height: 64.0,
        };
        let m = Material::aluminum_18kev();
        let ray = Ray::new(Vec3::new(0.0, -1e-3, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let (d, b) = analytic_line_integrals(&[], &cyl, &m, s, &ray);
        assert!((b - m.beta * 25.0 * s).abs() < 1e-24);
        assert!((d - m.delta * 25.0 * s).abs() < 1e-22);

        let miss = Ray::new(Vec3::new(13.0 * s, -1e-3, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(analytic_line_integrals(&[], &cyl, &m, s, &miss), (0.0, 0.0));

        let sphere = EllipsoidSpec {
            center: [0.0; 3],
            semi_axes: [4.0; 3],
        };
        let (_, b) = analytic_line_integrals(&[sphere], &cyl, &m, s, &ray);
        assert!((b - m.beta * (25.0 - 8.0) * s).abs() < 1e-24);
    }

    #[test]
    fn overlapping_voids_are_merged() {
        let cyl = Cylinder {
            radius: 12.5,
            height: 64.0,
        };
        let m = Material {
            delta: 1.0,
            beta: 1.0,
            energy_kev: 18.0,
        };
        let e = |y: f64| EllipsoidSpec {
            center: [0.0, y, 0.0],
            semi_axes: [3.0; 3],
        };
        let ray = Ray::new(Vec3::new(0.0, -100.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        // [-5, 1] ∪ [-1, 5] = [-5, 5]
        let (d, _) = analytic_line_integrals(&[e(-2.0), e(2.0)], &cyl, &m, 1.0, &ray);
        assert!((d - 15.0).abs() < 1e-12);
        // Identical voids count once.
        let (d, _) = analytic_line_integrals(&[e(0.0), e(0.0)], &cyl, &m, 1.0, &ray);
        assert!((d - 19.0).abs() < 1e-12);
    }

    #[test]
    fn vertical_rays_see_cylinder_height() {
        let cyl = Cylinder {
            radius: 5.0,
            height: 20.0,
        };
        let m = Material {
            delta: 1.0,
            beta: 2.0,
            energy_kev: 18.0,
        };
        let up = Ray::new(Vec3::new(1.0, 1.0, -50.0), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(analytic_line_integrals(&[], &cyl, &m, 1.0, &up), (20.0, 40.0));
    }

    #[test]
    fn dataset_is_repeatable_and_streams() {
        let t = small_spec((5, 10));
        let a: Vec<_> = generate_dataset(2, &t, 9).map(|p| p.unwrap().ellipsoids).collect();
        let b: Vec<_> = generate_dataset(2, &t, 9).map(|p| p.unwrap().ellipsoids).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn desk_defaults() {
        let s = PhantomSpec::desk();
        assert_eq!(s.grid.dims, [64, 64, 64]);
        assert_eq!(s.cylinder_radius, 12.5);
        assert_eq!(s.semi_axis_range, (5.0, 20.0));
        s.validate().unwrap();
        let f = PhantomSpec::full_scale();
        assert_eq!((f.cylinder_radius, f.cylinder_height), (50.0, 256.0));
        assert_eq!(f.semi_axis_range, (20.0, 80.0));
        let _ = GridSpec::centered([1, 1, 1], 1.0).unwrap();
    }
}
