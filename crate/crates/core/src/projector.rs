//! Projection-approximation forward model.
//!
//! For each detector pixel the ray through the grid box is sampled at `n`
//! midpoints of equal segments, the volume is read by trilinear
//! interpolation (zero outside the grid), and
//!
//! ```text
//! attenuation = k Σ Δt βⱼ      phase = k Σ Δt δⱼ
//! ```
//!
//! The complex log of the exit-wave ratio is then `ĉ = -attenuation - i·phase`.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, Aabb, GridSpec, Ray, ViewGeometry};
use crate::image::Image;
use crate::physics::{wavenumber, Channel};
use crate::rng;
use crate::volume::{trilinear_taps, RefractiveVolume};

/// One projection: attenuation always, phase when measured.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastImage {
    pub attenuation: Image,
    pub phase: Option<Image>,
    pub view: ViewGeometry,
}

impl ContrastImage {
    pub fn channel(&self, c: Channel) -> Option<&Image> {
        match c {
            Channel::Attenuation => Some(&self.attenuation),
            Channel::Phase => self.phase.as_ref(),
        }
    }

    pub fn channels(&self) -> Vec<Channel> {
        if self.phase.is_some() {
            vec![Channel::Attenuation, Channel::Phase]
        } else {
            vec![Channel::Attenuation]
        }
    }
}

/// Projections of one object at several angles.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub images: Vec<ContrastImage>,
    pub energy_kev: f64,
}

impl ProjectionStack {
    pub fn new(images: Vec<ContrastImage>, energy_kev: f64) -> Result<Self> {
        let s = ProjectionStack { images, energy_kev };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.images.first().ok_or(Error::Empty("projection stack"))?;
        let has_phase = first.phase.is_some();
        for (k, im) in self.images.iter().enumerate() {
            let v = &im.view;
            if v.detector_dims != first.view.detector_dims || v.pixel_size != first.view.pixel_size {
                return Err(Error::InvalidConfig(format!(
                    "view {k} detector {:?}/{} differs from view 0",
                    v.detector_dims, v.pixel_size
                )));
            }
            if im.phase.is_some() != has_phase {
                return Err(Error::InvalidConfig(format!(
                    "view {k} channel set differs from view 0"
                )));
            }
            let (h, w) = v.detector_dims;
            let dims_ok = |i: &Image| i.rows == h && i.cols == w;
            if !dims_ok(&im.attenuation) || !im.phase.as_ref().map_or(true, dims_ok) {
                return Err(Error::InvalidConfig(format!(
                    "view {k} image size does not match its detector"
                )));
            }
            if k > 0 && v.angle <= self.images[k - 1].view.angle {
                return Err(Error::InvalidConfig(
                    "view angles must be strictly increasing".into(),
                ));
            }
        }
        if !(self.energy_kev > 0.0) {
            return Err(Error::InvalidConfig("energy must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_channel(&self, c: Channel) -> bool {
        self.images.first().is_some_and(|im| im.channel(c).is_some())
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.images.first().map(|im| im.channels()).unwrap_or_default()
    }

    pub fn detector_dims(&self) -> (usize, usize) {
        self.images[0].view.detector_dims
    }

    pub fn angles(&self) -> Vec<f64> {
        self.images.iter().map(|im| im.view.angle).collect()
    }

    /// Same stack with every image multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ProjectionStack {
        let images = self
            .images
            .iter()
            .map(|im| ContrastImage {
                attenuation: im.attenuation.map(|v| v * c),
                phase: im.phase.as_ref().map(|p| p.map(|v| v * c)),
                view: im.view,
            })
            .collect();
        ProjectionStack {
            images,
            energy_kev: self.energy_kev,
        }
    }
}

/// Detector used to image a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detector {
    pub rows: usize,
    pub cols: usize,
    pub pixel_size: f64,
}

impl Detector {
    /// Detector matching the grid's `x` extent and `z` height, pixel = voxel.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Detector {
            rows: grid.dims[2],
            cols: grid.dims[0],
            pixel_size: grid.voxel_size,
        }
    }

    pub fn view(&self, angle: f64, index: usize) -> Result<ViewGeometry> {
        ViewGeometry::new(angle, (self.rows, self.cols), self.pixel_size, index)
    }
}

/// `n` equally spaced angles (radians) from `start_deg` to `stop_deg`,
/// both endpoints included.
pub fn equally_spaced_angles(n: usize, start_deg: f64, stop_deg: f64) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start_deg.to_radians()],
        _ => (0..n)
            .map(|i| (start_deg + (stop_deg - start_deg) * i as f64 / (n - 1) as f64).to_radians())
            .collect(),
    }
}

/// `n` equally spaced angles on the half-open range `[start, stop)`.
pub fn half_open_angles(n: usize, start_deg: f64, stop_deg: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (start_deg + (stop_deg - start_deg) * i as f64 / n as f64).to_radians())
        .collect()
}

/// Parses `"Nxstart:stop"` (degrees, endpoints inclusive), e.g. `"8x0:140"`.
pub fn parse_angle_spec(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("angle spec `{spec}` is not of the form Nxstart:stop"));
    let (n, range) = spec.split_once('x').ok_or_else(bad)?;
    let (a, b) = range.split_once(':').ok_or_else(bad)?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    if n == 0 || !(b > a || n == 1) {
        return Err(bad());
    }
    Ok(equally_spaced_angles(n, a, b))
}

/// Midpoints of `n` equal segments of `[t0, t1]` and the segment length.
pub fn uniform_depths(t0: f64, t1: f64, n: usize) -> (Vec<f64>, f64) {
    let dt = (t1 - t0) / n as f64;
    ((0..n).map(|j| t0 + (j as f64 + 0.5) * dt).collect(), dt)
}

/// `(Σ Δt δ, Σ Δt β)` along the part of `ray` inside the grid box.
pub(crate) fn integrate_ray(vol: &RefractiveVolume, bounds: &Aabb, ray: &Ray, n: usize) -> (f64, f64) {
    let Some((t0, t1)) = ray_aabb_intersect(ray, bounds) else {
        return (0.0, 0.0);
    };
    let (ts, dt) = uniform_depths(t0, t1, n);
    let (mut sd, mut sb) = (0.0, 0.0);
    for t in ts {
        for (i, w) in trilinear_taps(&vol.grid, ray.at(t)).iter() {
            sd += w * vol.delta[i];
            sb += w * vol.beta[i];
        }
    }
    (sd * dt, sb * dt)
}

pub fn forward_project_volume(
    vol: &RefractiveVolume,
    view: &ViewGeometry,
    n_depth: usize,
    energy_kev: f64,
) -> Result<ContrastImage> {
    if n_depth < 2 {
        return Err(Error::InvalidConfig(format!("n_depth must be >= 2, got {n_depth}")));
    }
    if !(view.pixel_size > 0.0) {
        return Err(Error::Degenerate(format!("pixel size {}", view.pixel_size)));
    }
    if !vol.is_finite() {
        return Err(Error::Degenerate("volume contains non-finite values".into()));
    }
    let k = wavenumber(energy_kev);
    let bounds = vol.grid.bounds();
    let (h, w) = view.detector_dims;
    let mut att = vec![0.0; h * w];
    let mut ph = vec![0.0; h * w];
    att.par_chunks_mut(w)
        .zip(ph.par_chunks_mut(w))
        .enumerate()
        .try_for_each(|(i, (arow, prow))| -> Result<()> {
            for j in 0..w {
                let ray = view.ray_for_pixel(i, j, &bounds)?;
                let (d, b) = integrate_ray(vol, &bounds, &ray, n_depth);
                arow[j] = k * b;
                prow[j] = k * d;
            }
            Ok(())
        })?;
    Ok(ContrastImage {
        attenuation: Image::from_vec(h, w, att),
        phase: Some(Image::from_vec(h, w, ph)),
        view: *view,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Depth samples per ray.
    pub n_depth: usize,
    /// Detector; `None` means [`Detector::for_grid`].
    pub detector: Option<Detector>,
    /// Standard deviation of additive Gaussian noise; `None` for noise-free.
    pub noise_std: Option<f64>,
    pub noise_seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            n_depth: 256,
            detector: None,
            noise_std: None,
            noise_seed: 0,
        }
    }
}

pub fn project_dataset(
    vol: &RefractiveVolume,
    angles: &[f64],
    energy_kev: f64,
    cfg: &ProjectorConfig,
) -> Result<ProjectionStack> {
    if angles.is_empty() {
        return Err(Error::Empty("angle list"));
    }
    let det = cfg.detector.unwrap_or_else(|| Detector::for_grid(&vol.grid));
    let mut images = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| forward_project_volume(vol, &det.view(a, i)?, cfg.n_depth, energy_kev))
        .collect::<Result<Vec<_>>>()?;
    if let Some(std) = cfg.noise_std.filter(|&s| s > 0.0) {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (i, im) in images.iter_mut().enumerate() {
            let mut r = rng::stream(cfg.noise_seed, i as u64);
            for v in im.attenuation.data.iter_mut() {
                *v += normal.sample(&mut r);
            }
            if let Some(p) = im.phase.as_mut() {
                for v in p.data.iter_mut() {
                    *v += normal.sample(&mut r);
                }
            }
        }
    }
    ProjectionStack::new(images, energy_kev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn zero_volume_projects_to_zero() {
        let g = GridSpec::centered([8, 8, 8], 1e-6).unwrap();
        let v = RefractiveVolume::zeros(g);
        let im = forward_project_volume(&v, &Detector::for_grid(&g).view(0.4, 0).unwrap(), 16, 18.0)
            .unwrap();
        assert!(im.attenuation.data.iter().all(|&x| x == 0.0));
        assert!(im.phase.unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slab_attenuation_matches_closed_form() {
        // 100 voxels of 3.2 µm along y = 320 µm of aluminum, padded by ten
        // empty voxels on either side so the interpolation ramps at the two
        // faces cancel.
        let s = 3.2e-6;
        let g = GridSpec::centered([4, 120, 4], s).unwrap();
        let (beta, delta) = (6.4088e-9, 1.6741e-7);
        let mut v = RefractiveVolume::zeros(g);
        for iz in 0..4 {
            for iy in 10..110 {
                for ix in 0..4 {
                    let i = g.index(ix, iy, iz);
                    v.delta[i] = delta;
                    v.beta[i] = beta;
                }
            }
        }
        let det = Detector::for_grid(&g);
        let im = forward_project_volume(&v, &det.view(0.0, 0).unwrap(), 256, 18.0).unwrap();
        let k = wavenumber(18.0);
        let expect = k * beta * 3.2e-4;
        let a = im.attenuation.get(1, 1);
        assert!((a - expect).abs() / expect < 1e-3, "{a} vs {expect}");
        assert!((expect - 0.18707).abs() < 1e-4);
    }

    #[test]
    fn angle_specs() {
        let a = parse_angle_spec("8x0:140").unwrap();
        assert_eq!(a.len(), 8);
        assert!((a[1] - a[0] - 20f64.to_radians()).abs() < 1e-12);
        assert!((a[7] - 140f64.to_radians()).abs() < 1e-12);
        let b = parse_angle_spec("8x0:131").unwrap();
        assert!((b[7] - 131f64.to_radians()).abs() < 1e-12);
        assert!(parse_angle_spec("8:0x1").is_err());
        assert_eq!(parse_angle_spec("1x30:30").unwrap(), vec![30f64.to_radians()]);
        let h = half_open_angles(4, 0.0, 180.0);
        assert!((h[3] - 135f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn single_angle_stack_equals_single_projection() {
        let mut spec = PhantomSpec::scaled(16, 0.0625);
        spec.ellipsoid_count = (1, 1);
        let p = generate_phantom(&spec).unwrap();
        let cfg = ProjectorConfig {
            n_depth: 32,
            ..Default::default()
        };
        let stack = project_dataset(&p.volume, &[0.3], 18.0, &cfg).unwrap();
        let det = Detector::for_grid(&p.volume.grid);
        let one = forward_project_volume(&p.volume, &det.view(0.3, 0).unwrap(), 32, 18.0).unwrap();
        assert_eq!(stack.images, vec![one]);
    }

    #[test]
    fn stack_validation() {
        let g = GridSpec::centered([4, 4, 4], 1.0).unwrap();
        let v = RefractiveVolume::zeros(g);
        let cfg = ProjectorConfig::default();
        assert!(project_dataset(&v, &[], 18.0, &cfg).is_err());
        let err = project_dataset(&v, &[0.5, 0.2], 18.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"));
    }

    #[test]
    fn noise_is_seeded() {
        let g = GridSpec::centered([4, 4, 4], 1.0).unwrap();
        let v = RefractiveVolume::zeros(g);
        let cfg = ProjectorConfig {
            n_depth: 4,
            noise_std: Some(0.1),
            ..Default::default()
        };
        let a = project_dataset(&v, &[0.0, 1.0], 18.0, &cfg).unwrap();
        let b = project_dataset(&v, &[0.0, 1.0], 18.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.images[0].attenuation.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn sample_point_sanity() {
        let g = GridSpec::centered([2, 2, 2], 1.0).unwrap();
        let v = RefractiveVolume::from_fields(g, vec![1.0; 8], vec![2.0; 8]).unwrap();
        assert_eq!(v.sample(Vec3::ZERO), (1.0, 2.0));
    }
}
