//! Voxelized refractive-index volumes and trilinear sampling.

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Vec3};
use crate::physics::Channel;

/// Voxel grid of `(δ, β)` pairs.
///
/// Both fields use the grid's linear index order (x fastest, z slowest).
#[derive(Clone, Debug, PartialEq)]
pub struct RefractiveVolume {
    pub grid: GridSpec,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl RefractiveVolume {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        RefractiveVolume {
            grid,
            delta: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }

    pub fn from_fields(grid: GridSpec, delta: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if delta.len() != n || beta.len() != n {
            return Err(Error::ShapeMismatch {
                op: "RefractiveVolume::from_fields",
                left: vec![delta.len(), beta.len()],
                right: vec![n, n],
            });
        }
        Ok(RefractiveVolume { grid, delta, beta })
    }

    /// The field that a contrast channel integrates: β for attenuation,
    /// δ for phase.
    pub fn field(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::Attenuation => &self.beta,
            Channel::Phase => &self.delta,
        }
    }

    pub fn field_mut(&mut self, channel: Channel) -> &mut [f64] {
        match channel {
            Channel::Attenuation => &mut self.beta,
            Channel::Phase => &mut self.delta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    pub fn is_non_negative(&self) -> bool {
        self.delta.iter().chain(&self.beta).all(|&v| v >= 0.0)
    }

    /// `a·self + b·other` on the same grid.
    pub fn linear_combination(&self, a: f64, other: &RefractiveVolume, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::InvalidConfig("volumes live on different grids".into()));
        }
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| a * x + b * y).collect();
        Ok(RefractiveVolume {
            grid: self.grid,
            delta: mix(&self.delta, &other.delta),
            beta: mix(&self.beta, &other.beta),
        })
    }

    /// Trilinear `(δ, β)` at a world point, zero outside the grid.
    pub fn sample(&self, p: Vec3) -> (f64, f64) {
        let mut d = 0.0;
        let mut b = 0.0;
        for (idx, w) in trilinear_taps(&self.grid, p).iter() {
            d += w * self.delta[idx];
            b += w * self.beta[idx];
        }
        (d, b)
    }
}

/// Up to eight `(voxel index, weight)` pairs of a trilinear lookup.
///
/// Corners that fall outside the grid are dropped (zero padding).
#[derive(Clone, Copy, Debug, Default)]
pub struct Taps {
    idx: [usize; 8],
    w: [f64; 8],
    n: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n).map(|k| (self.idx[k], self.w[k]))
    }

    pub fn weight_sum(&self) -> f64 {
        self.w[..self.n].iter().sum()
    }
}

pub fn trilinear_taps(grid: &GridSpec, p: Vec3) -> Taps {
    let c = grid.to_index_coords(p);
    let mut taps = Taps::default();
    let f = [c.x, c.y, c.z];
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let fl = f[a].floor();
        // Far outside: nothing to sample.
        if fl < -1.0 || fl > grid.dims[a] as f64 {
            return taps;
        }
        base[a] = fl as i64;
        frac[a] = f[a] - fl;
    }
    for corner in 0..8 {
        let mut w = 1.0;
        let mut ok = true;
        let mut ii = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let i = base[a] + hi as i64;
            if i < 0 || i >= grid.dims[a] as i64 {
                ok = false;
                break;
            }
            ii[a] = i as usize;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if ok && w != 0.0 {
            taps.idx[taps.n] = grid.index(ii[0], ii[1], ii[2]);
            taps.w[taps.n] = w;
            taps.n += 1;
        }
    }
    taps
}

/// Trilinear lookup in a single scalar field.
pub fn sample_field(grid: &GridSpec, field: &[f64], p: Vec3) -> f64 {
    trilinear_taps(grid, p).iter().map(|(i, w)| w * field[i]).sum()
}
