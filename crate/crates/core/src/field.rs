//! The conditioned neural field.
//!
//! A handful of constraint projections are encoded into pixel-aligned latent
//! grids. A world point `x` is mapped into each constraint view's frame,
//! positionally encoded, joined with the latent vector found under it, and
//! pushed through weight-shared residual blocks. The per-view activations are
//! averaged, so the result does not depend on view order, and a short head
//! maps the average to non-negative `(δ, β)`.
//!
//! Nothing in a [`FieldModel`] is tied to a voxel grid; [`render_volume`]
//! merely evaluates the continuous field at voxel centers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Ray, Vec3, ViewGeometry};
use crate::nnkit::{glorot_uniform, Graph, ParamStore, Scalar, Tensor, Var};
use crate::physics::{wavenumber, Channel};
use crate::projector::ContrastImage;
use crate::rng;
use crate::volume::RefractiveVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// Frequencies `L` per coordinate of the positional encoding.
    pub encoding_levels: usize,
    pub mlp_width: usize,
    /// Residual blocks applied per view before the mean.
    pub shared_blocks: usize,
    /// Residual blocks applied after the mean.
    pub head_blocks: usize,
    /// Latent dimension `D`; the sum of `stage_channels`.
    pub latent_dim: usize,
    pub encoder_stages: usize,
    pub stage_channels: Vec<usize>,
    /// 2 for `(δ, β)`, 1 for `β` only.
    pub output_channels: usize,
    /// Expected output magnitude per channel, in output order.
    pub output_scale: Vec<f64>,
    /// Multiplies contrast images before encoding.
    pub input_scale: f64,
    /// Depth half-extent in meters used to normalize the depth coordinate.
    pub scene_radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding_levels: 10,
            mlp_width: 128,
            shared_blocks: 3,
            head_blocks: 2,
            latent_dim: 64,
            encoder_stages: 3,
            stage_channels: vec![16, 16, 32],
            output_channels: 2,
            output_scale: vec![1e-7, 1e-8],
            input_scale: 1.0,
            scene_radius: GridSpec::centered([64, 64, 64], 3.2e-6)
                .expect("static grid")
                .bounds()
                .bounding_radius(),
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let counts = [
            ("encoding_levels", self.encoding_levels),
            ("mlp_width", self.mlp_width),
            ("shared_blocks", self.shared_blocks),
            ("head_blocks", self.head_blocks),
            ("latent_dim", self.latent_dim),
            ("encoder_stages", self.encoder_stages),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("field.{name} must be >= 1"));
            }
        }
        if !matches!(self.output_channels, 1 | 2) {
            return bad(format!("field.output_channels must be 1 or 2, got {}", self.output_channels));
        }
        if self.stage_channels.len() != self.encoder_stages
            || self.stage_channels.iter().sum::<usize>() != self.latent_dim
            || self.stage_channels.contains(&0)
        {
            return bad(format!(
                "field.stage_channels {:?} must have {} positive entries summing to latent_dim {}",
                self.stage_channels, self.encoder_stages, self.latent_dim
            ));
        }
        if self.output_scale.len() != self.output_channels || self.output_scale.iter().any(|&s| !(s > 0.0)) {
            return bad(format!(
                "field.output_scale {:?} needs {} positive entries",
                self.output_scale, self.output_channels
            ));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad("field.input_scale must be positive".into());
        }
        if !(self.scene_radius > 0.0 && self.scene_radius.is_finite()) {
            return bad("field.scene_radius must be positive".into());
        }
        Ok(())
    }

    /// Contrast channels in network order: `[phase, attenuation]` (fed by
    /// `δ`, `β`) or `[attenuation]`.
    pub fn channels(&self) -> Vec<Channel> {
        if self.output_channels == 2 {
            vec![Channel::Phase, Channel::Attenuation]
        } else {
            vec![Channel::Attenuation]
        }
    }
}

/// `γ(x)`: for each component `c`, `sin(2ˡπc), cos(2ˡπc)` for `l < L`.
pub fn positional_encoding(x: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * levels);
    for c in x {
        for l in 0..levels {
            let a = (1u64 << l) as f64 * std::f64::consts::PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Sorted depths along a ray inside `[t_near, t_far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSamples {
    t: Vec<f64>,
    t_near: f64,
    t_far: f64,
}

impl DepthSamples {
    pub fn new(t: Vec<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::Degenerate(format!("{} depth samples, need at least 2", t.len())));
        }
        let ordered = t.windows(2).all(|w| w[0] < w[1]);
        let inside = t[0] >= t_near && t[t.len() - 1] <= t_far;
        if !ordered || !inside || !(t_far > t_near) {
            return Err(Error::Degenerate("depth samples must increase strictly inside [t_near, t_far]".into()));
        }
        Ok(DepthSamples { t, t_near, t_far })
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.t_near, self.t_far)
    }

    /// `Δtⱼ = tⱼ₊₁ − tⱼ`, the last sample weighted by `t_far − t_N`.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.t.len();
        (0..n)
            .map(|j| if j + 1 < n { self.t[j + 1] - self.t[j] } else { self.t_far - self.t[j] })
            .collect()
    }
}

/// Per-view latent features aligned with the view's detector pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<S> {
    pub view: ViewGeometry,
    /// Shape `[H, W, D]`.
    pub features: Tensor<S>,
}

/// Bilinear taps `(pixel index, weight)` at pixel-index coordinates `(u, v)`
/// (column, row; pixel centers at integers). Queries beyond the detector
/// edge get zero weights.
fn latent_taps(u: f64, v: f64, rows: usize, cols: usize) -> [(usize, f64); 4] {
    let (wf, hf) = (cols as f64, rows as f64);
    if !(u >= -0.5 && u <= wf - 0.5 && v >= -0.5 && v <= hf - 0.5) {
        return [(0, 0.0); 4];
    }
    let u = u.clamp(0.0, wf - 1.0);
    let v = v.clamp(0.0, hf - 1.0);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    [
        (y0 * cols + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * cols + x1, fx * (1.0 - fy)),
        (y1 * cols + x0, (1.0 - fx) * fy),
        (y1 * cols + x1, fx * fy),
    ]
}

/// The latent vector at continuous pixel-index coordinates `(u, v)`;
/// zero outside the detector.
pub fn sample_latent<S: Scalar>(grid: &LatentGrid<S>, u: f64, v: f64) -> Vec<S> {
    let (h, w, d) = (grid.features.shape()[0], grid.features.shape()[1], grid.features.shape()[2]);
    let mut out = vec![S::zero(); d];
    for (idx, wt) in latent_taps(u, v, h, w) {
        if wt == 0.0 {
            continue;
        }
        let wt = S::of(wt);
        for (o, &f) in out.iter_mut().zip(&grid.features.data()[idx * d..][..d]) {
            *o += wt * f;
        }
    }
    out
}

/// Encoded views living inside one [`Graph`]: a `[M·H·W, D]` latent table
/// plus the view geometries.
#[derive(Clone, Debug)]
pub struct EncodedViews {
    pub table: Var,
    pub views: Vec<ViewGeometry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel<S> {
    pub config: FieldConfig,
    pub params: ParamStore<S>,
    pub energy_kev: f64,
}

impl<S: Scalar> FieldModel<S> {
    /// Fresh model with Glorot-uniform weights, zero biases and unit gain.
    pub fn new(config: FieldConfig, energy_kev: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut p = ParamStore::new();
        let mut c_in = config.output_channels;
        for (s, &c) in config.stage_channels.iter().enumerate() {
            p.insert(&format!("enc.{s}.w"), glorot_uniform(&[c, c_in, 3, 3], 9 * c_in, 9 * c, &mut rng));
            p.insert(&format!("enc.{s}.b"), Tensor::zeros(&[c]));
            c_in = c;
        }
        let w = config.mlp_width;
        let mut dense = |p: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize| {
            p.insert(&format!("{name}.w"), glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, &mut rng));
            p.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        dense(&mut p, "mlp.in", 6 * config.encoding_levels + config.latent_dim, w);
        for b in 0..config.shared_blocks {
            dense(&mut p, &format!("mlp.shared.{b}.fc0"), w, w);
            dense(&mut p, &format!("mlp.shared.{b}.fc1"), w, w);
        }
        for b in 0..config.head_blocks {
            dense(&mut p, &format!("mlp.head.{b}.fc0"), w, w);
            dense(&mut p, &format!("mlp.head.{b}.fc1"), w, w);
        }
        dense(&mut p, "mlp.out", w, config.output_channels);
        p.insert("out.log_gain", Tensor::zeros(&[config.output_channels]));
        Ok(FieldModel {
            config,
            params: p,
            energy_kev,
        })
    }

    pub fn wavenumber(&self) -> f64 {
        wavenumber(self.energy_kev)
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.config.channels()
    }

    fn check_views(&self, views: &[ViewGeometry]) -> Result<(usize, usize)> {
        let first = views.first().ok_or(Error::Empty("constraint set"))?;
        let dims = first.detector_dims;
        if views.iter().any(|v| v.detector_dims != dims) {
            return Err(Error::InvalidConfig("constraint views differ in detector size".into()));
        }
        Ok(dims)
    }

    /// Encodes `images` into a `[N·H·W, D]` latent table inside `g`.
    pub fn encode_graph(&self, g: &mut Graph<S>, images: &[&ContrastImage]) -> Result<EncodedViews> {
        let views: Vec<ViewGeometry> = images.iter().map(|im| im.view.clone()).collect();
        let (h, w) = self.check_views(&views)?;
        let channels = self.channels();
        let mut input = Vec::with_capacity(images.len() * channels.len() * h * w);
        for im in images {
            if im.channels().len() != channels.len() {
                return Err(Error::InvalidConfig(format!(
                    "image has channels {:?}, model expects {:?}",
                    im.channels(),
                    channels
                )));
            }
            for &c in &channels {
                let img = im.channel(c).ok_or(Error::ChannelAbsent(c))?;
                input.extend(img.data.iter().map(|&v| S::of(v * self.config.input_scale)));
            }
        }
        let mut x = g.constant(Tensor::new(vec![images.len(), channels.len(), h, w], input)?)?;
        let mut stages = Vec::with_capacity(self.config.encoder_stages);
        for s in 0..self.config.encoder_stages {
            let wk = g.param(&self.params, &format!("enc.{s}.w"))?;
            let bk = g.param(&self.params, &format!("enc.{s}.b"))?;
            x = g.conv2d(x, wk, bk, 1, 1)?;
            x = g.relu(x)?;
            x = g.avg_pool2(x)?;
            stages.push(g.resize_bilinear(x, h, w)?);
        }
        let cat = g.concat_channels(&stages)?;
        let table = g.nchw_to_rows(cat)?;
        Ok(EncodedViews { table, views })
    }

    fn block(&self, g: &mut Graph<S>, h: Var, prefix: &str) -> Result<Var> {
        let mut a = g.relu(h)?;
        for fc in ["fc0", "fc1"] {
            let w = g.param(&self.params, &format!("{prefix}.{fc}.w"))?;
            let b = g.param(&self.params, &format!("{prefix}.{fc}.b"))?;
            a = g.dense(a, w, b)?;
            if fc == "fc0" {
                a = g.relu(a)?;
            }
        }
        g.add(h, a)
    }

    /// `[P, C]` field values at `points`, columns in network order (`δ`, `β`).
    pub fn field_graph(&self, g: &mut Graph<S>, enc: &EncodedViews, points: &[Vec3]) -> Result<Var> {
        let (h, w) = self.check_views(&enc.views)?;
        let m = enc.views.len();
        let levels = self.config.encoding_levels;
        let mut encoding = Vec::with_capacity(points.len() * m * 6 * levels);
        let mut taps = Vec::with_capacity(points.len() * m * 4);
        for &x in points {
            for (vi, view) in enc.views.iter().enumerate() {
                let c = view.world_to_view(x);
                let local = [
                    2.0 * c.u / w as f64 - 1.0,
                    2.0 * c.v / h as f64 - 1.0,
                    c.depth / self.config.scene_radius,
                ];
                encoding.extend(positional_encoding(local, levels).into_iter().map(S::of));
                for (idx, wt) in latent_taps(c.u - 0.5, c.v - 0.5, h, w) {
                    taps.push((vi * h * w + idx, S::of(wt)));
                }
            }
        }
        let gamma = g.constant(Tensor::new(vec![points.len() * m, 6 * levels], encoding)?)?;
        let latent = g.gather_rows(enc.table, taps, 4)?;
        let inp = g.concat_cols(gamma, latent)?;
        let wi = g.param(&self.params, "mlp.in.w")?;
        let bi = g.param(&self.params, "mlp.in.b")?;
        let mut hid = g.dense(inp, wi, bi)?;
        for b in 0..self.config.shared_blocks {
            hid = self.block(g, hid, &format!("mlp.shared.{b}"))?;
        }
        hid = g.mean_groups(hid, m)?;
        for b in 0..self.config.head_blocks {
            hid = self.block(g, hid, &format!("mlp.head.{b}"))?;
        }
        hid = g.relu(hid)?;
        let wo = g.param(&self.params, "mlp.out.w")?;
        let bo = g.param(&self.params, "mlp.out.b")?;
        let out = g.dense(hid, wo, bo)?;
        let out = g.softplus(out)?;
        let base = g.constant(Tensor::from_f64(&[self.config.output_channels], &self.config.output_scale)?)?;
        let out = g.mul_cols(out, base)?;
        let lg = g.param(&self.params, "out.log_gain")?;
        let gain = g.exp(lg)?;
        g.mul_cols(out, gain)
    }

    /// `[R, C]` rendered contrasts, columns in [`FieldModel::channels`] order:
    /// `k Σⱼ Δtⱼ f(r(tⱼ))`.
    pub fn render_graph(&self, g: &mut Graph<S>, enc: &EncodedViews, rays: &[(Ray, DepthSamples)]) -> Result<Var> {
        let k = self.wavenumber();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut offsets = vec![0];
        for (ray, depths) in rays {
            for (&t, dt) in depths.t().iter().zip(depths.deltas()) {
                points.push(ray.at(t));
                weights.push(S::of(k * dt));
            }
            offsets.push(points.len());
        }
        let f = self.field_graph(g, enc, &points)?;
        g.segment_sum(f, weights, offsets)
    }

    /// Adds the latent grids as a constant table to `g`.
    fn constant_table(&self, g: &mut Graph<S>, constraints: &ConstraintSet<S>) -> Result<EncodedViews> {
        let first = constraints.views.first().ok_or(Error::Empty("constraint set"))?;
        let d = first.1.features.shape()[2];
        let mut data = Vec::new();
        for (_, lg) in &constraints.views {
            data.extend_from_slice(lg.features.data());
        }
        let rows = data.len() / d;
        let table = g.constant(Tensor::new(vec![rows, d], data)?)?;
        Ok(EncodedViews {
            table,
            views: constraints.views.iter().map(|(_, lg)| lg.view.clone()).collect(),
        })
    }
}

/// Encodes each image into its own latent grid.
pub fn encode_views<S: Scalar>(images: &[ContrastImage], model: &FieldModel<S>) -> Result<Vec<LatentGrid<S>>> {
    let mut g = Graph::new();
    let refs: Vec<&ContrastImage> = images.iter().collect();
    let enc = model.encode_graph(&mut g, &refs)?;
    let (h, w) = enc.views[0].detector_dims;
    let d = model.config.latent_dim;
    let table = g.value(enc.table).data();
    Ok(enc
        .views
        .iter()
        .enumerate()
        .map(|(i, view)| LatentGrid {
            view: view.clone(),
            features: Tensor::new(vec![h, w, d], table[i * h * w * d..][..h * w * d].to_vec()).expect("sized"),
        })
        .collect())
}

/// Encoded constraint views conditioning one reconstruction.
#[derive(Clone, Debug)]
pub struct ConstraintSet<S> {
    pub views: Vec<(ContrastImage, LatentGrid<S>)>,
}

impl<S: Scalar> ConstraintSet<S> {
    pub fn encode(model: &FieldModel<S>, images: &[ContrastImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("constraint set"));
        }
        let grids = encode_views(images, model)?;
        Ok(ConstraintSet {
            views: images.iter().cloned().zip(grids).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// `(δ, β)` at each point; `δ` is zero for a single-channel model.
pub fn field_eval_batch<S: Scalar>(
    points: &[Vec3],
    constraints: &ConstraintSet<S>,
    model: &FieldModel<S>,
) -> Result<Vec<(f64, f64)>> {
    let mut g = Graph::new();
    let enc = model.constant_table(&mut g, constraints)?;
    let f = model.field_graph(&mut g, &enc, points)?;
    let v = g.value(f).data();
    Ok(if model.config.output_channels == 2 {
        v.chunks(2).map(|c| (c[0].as_f64(), c[1].as_f64())).collect()
    } else {
        v.iter().map(|b| (0.0, b.as_f64())).collect()
    })
}

pub fn field_eval<S: Scalar>(x: Vec3, constraints: &ConstraintSet<S>, model: &FieldModel<S>) -> Result<(f64, f64)> {
    Ok(field_eval_batch(&[x], constraints, model)?[0])
}

/// Rendered contrast of one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderedContrast {
    pub attenuation: f64,
    pub phase: Option<f64>,
}

pub fn render_ray<S: Scalar>(
    ray: &Ray,
    depths: &DepthSamples,
    constraints: &ConstraintSet<S>,
    model: &FieldModel<S>,
) -> Result<RenderedContrast> {
    let mut g = Graph::new();
    let enc = model.constant_table(&mut g, constraints)?;
    let out = model.render_graph(&mut g, &enc, &[(*ray, depths.clone())])?;
    let v = g.value(out).data();
    Ok(if model.config.output_channels == 2 {
        RenderedContrast {
            attenuation: v[1].as_f64(),
            phase: Some(v[0].as_f64()),
        }
    } else {
        RenderedContrast {
            attenuation: v[0].as_f64(),
            phase: None,
        }
    })
}

/// Evaluates the field at every voxel center of `grid`, `chunk` points per
/// network pass. The output does not depend on `chunk`.
pub fn render_volume<S: Scalar>(
    model: &FieldModel<S>,
    constraints: &ConstraintSet<S>,
    grid: &GridSpec,
    chunk: usize,
) -> Result<RefractiveVolume> {
    grid.validate()?;
    let points: Vec<Vec3> = grid.voxel_centers().collect();
    let parts: Vec<Vec<(f64, f64)>> = points
        .par_chunks(chunk.max(1))
        .map(|c| field_eval_batch(c, constraints, model))
        .collect::<Result<_>>()?;
    let (delta, beta): (Vec<f64>, Vec<f64>) = parts.into_iter().flatten().unzip();
    RefractiveVolume::from_fields(*grid, delta, beta)
}
