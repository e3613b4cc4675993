//! Reconstruction quality metrics.
//!
//! Both metrics are computed per refractive channel (`δ`, `β`) inside a
//! cylindrical ring mask and averaged over the channels whose masked
//! reference is not identically zero.
//!
//! * relative L2: `‖c − r‖₂ / ‖r‖₂` over masked voxels.
//! * DSSIM: `(1 − SSIM) / 2` with SSIM evaluated on each axial slice using a
//!   7×7 Gaussian window (σ = 1.5, weights renormalized at the slice border),
//!   `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, `L` the masked reference range, and
//!   averaged over in-mask pixels of all slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::geometry::GridSpec;
use crate::image::Image;
use crate::io::VolumeChannel;
use crate::nnkit::Scalar;
use crate::projector::ProjectionStack;
use crate::trainer::infer;
use crate::volume::RefractiveVolume;

/// Cylindrical mask about the grid's vertical center line. A voxel is kept
/// when `inner ≤ r < outer`, `r` measured in voxels in the `xy` plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingMask {
    pub inner: f64,
    pub outer: f64,
}

impl RingMask {
    pub fn new(inner: f64, outer: f64) -> Result<Self> {
        if !(inner >= 0.0 && outer >= inner && outer.is_finite()) {
            return Err(Error::InvalidConfig(format!("ring mask needs 0 <= inner <= outer, got {inner}, {outer}")));
        }
        Ok(RingMask { inner, outer })
    }

    /// The largest mask a grid admits; it keeps every voxel.
    pub fn full(grid: &GridSpec) -> Self {
        RingMask {
            inner: 0.0,
            outer: circumscribed_radius(grid),
        }
    }

    fn radius(grid: &GridSpec, ix: usize, iy: usize) -> f64 {
        let cx = (grid.dims[0] as f64 - 1.0) * 0.5;
        let cy = (grid.dims[1] as f64 - 1.0) * 0.5;
        ((ix as f64 - cx).powi(2) + (iy as f64 - cy).powi(2)).sqrt()
    }

    pub fn contains(&self, grid: &GridSpec, ix: usize, iy: usize) -> bool {
        let r = Self::radius(grid, ix, iy);
        r >= self.inner && r < self.outer
    }

    /// In-mask flags for one `xy` slice, row-major `(iy, ix)`.
    pub fn slice_mask(&self, grid: &GridSpec) -> Result<Vec<bool>> {
        if self.outer > circumscribed_radius(grid) + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "ring mask radius {} exceeds the grid's {:.3}",
                self.outer,
                circumscribed_radius(grid)
            )));
        }
        let [nx, ny, _] = grid.dims;
        Ok((0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| self.contains(grid, ix, iy))
            .collect())
    }
}

fn circumscribed_radius(grid: &GridSpec) -> f64 {
    (grid.dims[0] as f64 * 0.5).hypot(grid.dims[1] as f64 * 0.5)
}

fn mask_field(field: &[f64], slice: &[bool]) -> Vec<f64> {
    field
        .chunks(slice.len())
        .flat_map(|s| s.iter().zip(slice).map(|(&v, &m)| if m { v } else { 0.0 }))
        .collect()
}

/// Zeroes voxels outside the mask.
pub fn apply_mask(vol: &RefractiveVolume, mask: &RingMask) -> Result<RefractiveVolume> {
    let slice = mask.slice_mask(&vol.grid)?;
    RefractiveVolume::from_fields(vol.grid, mask_field(&vol.delta, &slice), mask_field(&vol.beta, &slice))
}

fn channel_name(c: VolumeChannel) -> &'static str {
    match c {
        VolumeChannel::Delta => "delta",
        VolumeChannel::Beta => "beta",
    }
}

fn field_of(vol: &RefractiveVolume, c: VolumeChannel) -> &[f64] {
    match c {
        VolumeChannel::Delta => &vol.delta,
        VolumeChannel::Beta => &vol.beta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetric {
    pub channel: VolumeChannel,
    pub value: f64,
}

/// A channel-averaged metric with its per-channel parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub per_channel: Vec<ChannelMetric>,
}

fn check_grids(cand: &RefractiveVolume, reference: &RefractiveVolume) -> Result<()> {
    if cand.grid != reference.grid {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: cand.grid.dims.to_vec(),
            right: reference.grid.dims.to_vec(),
        });
    }
    Ok(())
}

/// Masked channels of the reference that are not identically zero.
fn present_channels(
    cand: &RefractiveVolume,
    reference: &RefractiveVolume,
    mask: &RingMask,
) -> Result<(Vec<bool>, Vec<VolumeChannel>)> {
    check_grids(cand, reference)?;
    let slice = mask.slice_mask(&reference.grid)?;
    let present: Vec<VolumeChannel> = [VolumeChannel::Delta, VolumeChannel::Beta]
        .into_iter()
        .filter(|&c| mask_field(field_of(reference, c), &slice).iter().any(|&v| v != 0.0))
        .collect();
    if present.is_empty() {
        return Err(Error::Degenerate("reference is zero inside the mask".into()));
    }
    Ok((slice, present))
}

fn average(per_channel: Vec<ChannelMetric>) -> MetricValue {
    let value = per_channel.iter().map(|c| c.value).sum::<f64>() / per_channel.len() as f64;
    MetricValue { value, per_channel }
}

pub fn l2_metric(cand: &RefractiveVolume, reference: &RefractiveVolume, mask: &RingMask) -> Result<MetricValue> {
    let (slice, present) = present_channels(cand, reference, mask)?;
    let per = present
        .into_iter()
        .map(|c| {
            let r = mask_field(field_of(reference, c), &slice);
            let x = mask_field(field_of(cand, c), &slice);
            let num: f64 = x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = r.iter().map(|b| b * b).sum();
            ChannelMetric {
                channel: c,
                value: (num / den).sqrt(),
            }
        })
        .collect();
    Ok(average(per))
}

const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f64 = 1.5;

/// Separable Gaussian filter with border-renormalized weights.
fn gaussian_filter(img: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * WINDOW_RADIUS)
        .map(|i| {
            let d = i as f64 - WINDOW_RADIUS as f64;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let pass = |src: &[f64], n: usize, stride: usize, count: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            let base = line * step;
            for i in 0..n {
                let (mut s, mut w) = (0.0, 0.0);
                let lo = i.saturating_sub(WINDOW_RADIUS);
                let hi = (i + WINDOW_RADIUS).min(n - 1);
                for j in lo..=hi {
                    let kw = k[j + WINDOW_RADIUS - i];
                    s += kw * src[base + j * stride];
                    w += kw;
                }
                out[base + i * stride] = s / w;
            }
        }
        out
    };
    let horiz = pass(img, cols, 1, rows, cols);
    pass(&horiz, rows, cols, cols, 1)
}

/// Mean SSIM over in-mask pixels of one slice.
fn slice_ssim(x: &[f64], y: &[f64], rows: usize, cols: usize, mask: &[bool], c1: f64, c2: f64) -> f64 {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = gaussian_filter(x, rows, cols);
    let my = gaussian_filter(y, rows, cols);
    let sxx = gaussian_filter(&prod(x, x), rows, cols);
    let syy = gaussian_filter(&prod(y, y), rows, cols);
    let sxy = gaussian_filter(&prod(x, y), rows, cols);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..x.len() {
        if !mask[i] {
            continue;
        }
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        total += num / den;
        count += 1;
    }
    total / count as f64
}

pub fn dssim_metric(cand: &RefractiveVolume, reference: &RefractiveVolume, mask: &RingMask) -> Result<MetricValue> {
    let (slice, present) = present_channels(cand, reference, mask)?;
    if !slice.contains(&true) {
        return Err(Error::Degenerate("mask keeps no voxels".into()));
    }
    let [nx, ny, nz] = reference.grid.dims;
    let plane = nx * ny;
    let mut per = Vec::new();
    for c in present {
        let r = mask_field(field_of(reference, c), &slice);
        let x = mask_field(field_of(cand, c), &slice);
        let inside = r.chunks(plane).flat_map(|s| s.iter().zip(&slice).filter(|(_, &m)| m).map(|(&v, _)| v));
        let (lo, hi) = inside.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::Degenerate(format!("{} reference has no dynamic range in the mask", channel_name(c))));
        }
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let ssim: f64 = (0..nz)
            .map(|z| slice_ssim(&x[z * plane..][..plane], &r[z * plane..][..plane], ny, nx, &slice, c1, c2))
            .sum::<f64>()
            / nz as f64;
        per.push(ChannelMetric {
            channel: c,
            value: ((1.0 - ssim) * 0.5).clamp(0.0, 1.0),
        });
    }
    Ok(average(per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l2: f64,
    pub dssim: f64,
    pub l2_per_channel: Vec<ChannelMetric>,
    pub dssim_per_channel: Vec<ChannelMetric>,
    pub channel_averaging: String,
}

pub fn evaluate(cand: &RefractiveVolume, reference: &RefractiveVolume, mask: &RingMask) -> Result<MetricReport> {
    let l2 = l2_metric(cand, reference, mask)?;
    let dssim = dssim_metric(cand, reference, mask)?;
    Ok(MetricReport {
        l2: l2.value,
        dssim: dssim.value,
        l2_per_channel: l2.per_channel,
        dssim_per_channel: dssim.per_channel,
        channel_averaging: "mean over channels whose masked reference is nonzero".into(),
    })
}

/// Axis-aligned sum projections of one field.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoImages {
    /// Sum over `z`: rows `y`, columns `x`.
    pub top: Image,
    /// Sum over `y`: rows `z`, columns `x`.
    pub front: Image,
    /// Sum over `x`: rows `z`, columns `y`.
    pub left: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrthoProjections {
    pub delta: OrthoImages,
    pub beta: OrthoImages,
}

fn ortho(field: &[f64], grid: &GridSpec) -> OrthoImages {
    let [nx, ny, nz] = grid.dims;
    let mut top = Image::zeros(ny, nx);
    let mut front = Image::zeros(nz, nx);
    let mut left = Image::zeros(nz, ny);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let v = field[grid.index(ix, iy, iz)];
                top.data[iy * nx + ix] += v;
                front.data[iz * nx + ix] += v;
                left.data[iz * ny + iy] += v;
            }
        }
    }
    OrthoImages { top, front, left }
}

pub fn ortho_projections(vol: &RefractiveVolume) -> OrthoProjections {
    OrthoProjections {
        delta: ortho(&vol.delta, &vol.grid),
        beta: ortho(&vol.beta, &vol.grid),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        SummaryStats {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationEntry {
    pub indices: Vec<usize>,
    /// Smallest angular separation between chosen views, degrees, modulo 180.
    pub min_separation_deg: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationStudy {
    /// Sorted by ascending DSSIM.
    pub entries: Vec<CombinationEntry>,
    pub l2: SummaryStats,
    pub dssim: SummaryStats,
    /// Spearman rank correlation of `min_separation_deg` against DSSIM;
    /// `None` when either is constant.
    pub spearman_separation_dssim: Option<f64>,
}

impl CombinationStudy {
    /// One row per subset: `indices,min_separation_deg,l2,dssim`, indices
    /// separated by spaces.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("indices,min_separation_deg,l2,dssim\n");
        for e in &self.entries {
            let idx: Vec<String> = e.indices.iter().map(usize::to_string).collect();
            s.push_str(&format!(
                "{},{},{:e},{:e}\n",
                idx.join(" "),
                e.min_separation_deg,
                e.report.l2,
                e.report.dssim
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,min,max\n");
        for (name, st) in [("l2", self.l2), ("dssim", self.dssim)] {
            s.push_str(&format!("{name},{:e},{:e},{:e},{:e}\n", st.mean, st.std, st.min, st.max));
        }
        s
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] < n - k + i) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 * 0.5;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn min_separation_deg(angles: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, &a) in angles.iter().enumerate() {
        for &b in &angles[i + 1..] {
            let d = (a - b).abs().rem_euclid(std::f64::consts::PI);
            best = best.min(d.min(std::f64::consts::PI - d));
        }
    }
    best.to_degrees()
}

const MAX_COMBINATIONS: usize = 5000;

/// Reconstructs from every `k`-subset of the stack's views and scores each
/// against `reference`.
#[allow(clippy::too_many_arguments)]
pub fn combination_study<S: Scalar>(
    model: &FieldModel<S>,
    stack: &ProjectionStack,
    k: usize,
    reference: &RefractiveVolume,
    mask: &RingMask,
    chunk: usize,
) -> Result<CombinationStudy> {
    if k == 0 || k >= stack.len() {
        return Err(Error::InsufficientViews {
            needed: k + 1,
            found: stack.len(),
        });
    }
    let subsets = combinations(stack.len(), k);
    if subsets.len() > MAX_COMBINATIONS {
        return Err(Error::InvalidConfig(format!("{} combinations exceed the limit", subsets.len())));
    }
    let angles = stack.angles();
    let mut entries = Vec::with_capacity(subsets.len());
    for indices in subsets {
        let vol = infer(model, stack, &indices, &reference.grid, chunk)?;
        let report = evaluate(&vol, reference, mask)?;
        let chosen: Vec<f64> = indices.iter().map(|&i| angles[i]).collect();
        entries.push(CombinationEntry {
            min_separation_deg: min_separation_deg(&chosen),
            indices,
            report,
        });
    }
    entries.sort_by(|a, b| a.report.dssim.total_cmp(&b.report.dssim));
    let l2: Vec<f64> = entries.iter().map(|e| e.report.l2).collect();
    let ds: Vec<f64> = entries.iter().map(|e| e.report.dssim).collect();
    let sep: Vec<f64> = entries.iter().map(|e| e.min_separation_deg).collect();
    Ok(CombinationStudy {
        l2: SummaryStats::of(&l2),
        dssim: SummaryStats::of(&ds),
        spearman_separation_dssim: spearman(&sep, &ds),
        entries,
    })
}
