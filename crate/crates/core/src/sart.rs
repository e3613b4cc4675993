//! Simultaneous Algebraic Reconstruction Technique.
//!
//! The system matrix is never stored. Row `i` of `A` (one detector pixel of
//! one view) is the ray-marching projector of [`crate::projector`]: `n`
//! midpoint samples of the ray's chord through the grid box, each spreading
//! weight `Δt · w` over its trilinear taps. One view update is
//!
//! ```text
//! x_j += λ / c_j · Σ_i a_ij (p_i − (A x)_i) / r_i
//! ```
//!
//! with row sums `r_i = Σ_j a_ij` (ray length through the grid) and column
//! sums `c_j = Σ_i a_ij` over the rays of that view. The result is the line
//! density the channel integrates, `kβ` or `kδ` per meter.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, Aabb, GridSpec, ViewGeometry};
use crate::physics::{wavenumber, Channel};
use crate::projector::{uniform_depths, ProjectionStack};
use crate::rng;
use crate::volume::{trilinear_taps, RefractiveVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleOrder {
    #[default]
    Sequential,
    /// Fresh permutation of the views every iteration.
    Shuffled(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SartConfig {
    pub iterations: usize,
    /// λ in (0, 2).
    pub relaxation: f64,
    pub angle_order: AngleOrder,
    pub grid: GridSpec,
    /// Depth samples per ray.
    pub n_depth: usize,
    /// Clamp the estimate at zero after every view update.
    pub clamp_non_negative: bool,
}

impl Default for SartConfig {
    fn default() -> Self {
        SartConfig {
            iterations: 50,
            relaxation: 0.5,
            angle_order: AngleOrder::Sequential,
            grid: GridSpec::centered([64, 64, 64], 3.2e-6).expect("static grid"),
            n_depth: 128,
            clamp_non_negative: false,
        }
    }
}

impl SartConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("SART iterations must be >= 1".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "relaxation {} outside (0, 2)",
                self.relaxation
            )));
        }
        if self.n_depth < 2 {
            return Err(Error::InvalidConfig("n_depth must be >= 2".into()));
        }
        Ok(())
    }
}

/// Reconstructed line density plus the mean relative residual of every
/// iteration (measured for each view just before its update).
#[derive(Clone, Debug)]
pub struct SartOutput {
    pub field: Vec<f64>,
    pub residual_history: Vec<f64>,
}

struct ViewPass<'a> {
    grid: &'a GridSpec,
    bounds: Aabb,
    view: &'a ViewGeometry,
    n_depth: usize,
}

impl ViewPass<'_> {
    /// Calls `f(tap index, Δt·w)` for every sample of pixel `(i, j)`.
    fn for_each_weight(&self, i: usize, j: usize, mut f: impl FnMut(usize, f64)) {
        let Ok(ray) = self.view.ray_for_pixel(i, j, &self.bounds) else {
            return;
        };
        let Some((t0, t1)) = ray_aabb_intersect(&ray, &self.bounds) else {
            return;
        };
        let (ts, dt) = uniform_depths(t0, t1, self.n_depth);
        for t in ts {
            for (idx, w) in trilinear_taps(self.grid, ray.at(t)).iter() {
                f(idx, dt * w);
            }
        }
    }

    /// `(A x)_i` and `r_i` for every pixel.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = self.view.detector_dims;
        let mut ax = vec![0.0; h * w];
        let mut rows = vec![0.0; h * w];
        ax.par_chunks_mut(w)
            .zip(rows.par_chunks_mut(w))
            .enumerate()
            .for_each(|(i, (ax_row, r_row))| {
                for j in 0..w {
                    let (mut s, mut r) = (0.0, 0.0);
                    self.for_each_weight(i, j, |idx, a| {
                        s += a * x[idx];
                        r += a;
                    });
                    ax_row[j] = s;
                    r_row[j] = r;
                }
            });
        (ax, rows)
    }
}

fn views_and_channel<'a>(
    stack: &'a ProjectionStack,
    channel: Channel,
) -> Result<Vec<(&'a ViewGeometry, &'a [f64])>> {
    if stack.is_empty() {
        return Err(Error::Empty("projection stack"));
    }
    stack
        .images
        .iter()
        .map(|im| {
            im.channel(channel)
                .map(|img| (&im.view, img.data.as_slice()))
                .ok_or(Error::ChannelAbsent(channel))
        })
        .collect()
}

pub fn sart_reconstruct(stack: &ProjectionStack, channel: Channel, cfg: &SartConfig) -> Result<Vec<f64>> {
    Ok(sart_reconstruct_with_history(stack, channel, cfg)?.field)
}

pub fn sart_reconstruct_with_history(
    stack: &ProjectionStack,
    channel: Channel,
    cfg: &SartConfig,
) -> Result<SartOutput> {
    cfg.validate()?;
    let views = views_and_channel(stack, channel)?;
    let grid = &cfg.grid;
    let bounds = grid.bounds();
    let mut x = vec![0.0; grid.len()];
    let mut num = vec![0.0; grid.len()];
    let mut den = vec![0.0; grid.len()];
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if let AngleOrder::Shuffled(seed) = cfg.angle_order {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng::stream(seed, it as u64));
        }
        let mut residual_sum = 0.0;
        for &v in &order {
            let (view, measured) = views[v];
            let pass = ViewPass {
                grid,
                bounds,
                view,
                n_depth: cfg.n_depth,
            };
            let (ax, rows) = pass.forward(&x);
            let (mut rnorm, mut pnorm) = (0.0, 0.0);
            let scaled: Vec<f64> = measured
                .iter()
                .zip(&ax)
                .zip(&rows)
                .map(|((&p, &a), &r)| {
                    rnorm += (p - a) * (p - a);
                    pnorm += p * p;
                    if r > 0.0 {
                        (p - a) / r
                    } else {
                        0.0
                    }
                })
                .collect();
            residual_sum += if pnorm > 0.0 { (rnorm / pnorm).sqrt() } else { rnorm.sqrt() };

            num.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            let (h, w) = view.detector_dims;
            for i in 0..h {
                for j in 0..w {
                    let s = scaled[i * w + j];
                    pass.for_each_weight(i, j, |idx, a| {
                        num[idx] += a * s;
                        den[idx] += a;
                    });
                }
            }
            for ((xj, &n), &d) in x.iter_mut().zip(&num).zip(&den) {
                if d > 0.0 {
                    *xj += cfg.relaxation * n / d;
                    if cfg.clamp_non_negative && *xj < 0.0 {
                        *xj = 0.0;
                    }
                }
            }
        }
        history.push(residual_sum / views.len() as f64);
    }
    Ok(SartOutput {
        field: x,
        residual_history: history,
    })
}

/// Runs SART on every channel of the stack and converts line densities to
/// `(δ, β)` by dividing by `k`. Absent channels are zero.
pub fn sart_reconstruct_stack(stack: &ProjectionStack, cfg: &SartConfig) -> Result<RefractiveVolume> {
    let k = wavenumber(stack.energy_kev);
    let mut vol = RefractiveVolume::zeros(cfg.grid);
    for c in stack.channels() {
        let field = sart_reconstruct(stack, c, cfg)?;
        vol.field_mut(c)
            .iter_mut()
            .zip(field)
            .for_each(|(dst, v)| *dst = v / k);
    }
    Ok(vol)
}

/// `‖A x − p‖ / ‖p‖` over all views of the stack for a line-density field.
pub fn reprojection_residual(
    field: &[f64],
    stack: &ProjectionStack,
    channel: Channel,
    grid: &GridSpec,
    n_depth: usize,
) -> Result<f64> {
    let views = views_and_channel(stack, channel)?;
    let (mut rn, mut pn) = (0.0, 0.0);
    for (view, measured) in views {
        let pass = ViewPass {
            grid,
            bounds: grid.bounds(),
            view,
            n_depth,
        };
        let (ax, _) = pass.forward(field);
        for (p, a) in measured.iter().zip(ax) {
            rn += (p - a) * (p - a);
            pn += p * p;
        }
    }
    if pn == 0.0 {
        return Err(Error::Degenerate("measured projections are all zero".into()));
    }
    Ok((rn / pn).sqrt())
}
