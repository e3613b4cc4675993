//! Self-supervised training of a [`FieldModel`] from projections alone.
//!
//! One iteration draws `batch_objects` stacks. For each stack a fresh random
//! subset of `constraint_count` views is encoded, rays are drawn from all
//! views (constraints included) with probability following the image
//! gradient, depths are stratified along each ray, and the rendered
//! contrasts are compared with the measured pixels. The loss is the mean over
//! rays of the squared error summed over channels; gradients are averaged
//! over the batch and applied with Adam.
//!
//! Each `(iteration, slot)` pair owns its random stream and per-object
//! gradients are reduced in slot order, so a run is reproducible for any
//! number of worker threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{render_volume, ConstraintSet, DepthSamples, FieldModel};
use crate::geometry::{ray_aabb_intersect, Aabb, GridSpec, Ray};
use crate::io::write_checkpoint;
use crate::nnkit::{adam_step, AdamState, GradAccumulator, Graph, Scalar, Tensor};
use crate::physics::Channel;
use crate::projector::ProjectionStack;
use crate::rng::{self, StreamRng};
use crate::volume::RefractiveVolume;

const DOMAIN_EPOCH: u64 = 1;
const DOMAIN_SLOT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub factor: f64,
    /// First epoch (0-based) trained at the reduced rate.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub rays_per_iter: usize,
    pub depth_samples: usize,
    pub batch_objects: usize,
    pub constraint_count: usize,
    pub lr: f64,
    pub lr_drop: Option<LrDrop>,
    pub epochs: usize,
    /// Stops early after this many iterations when set.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    /// PDF floor as a fraction of the mean gradient magnitude.
    pub pdf_floor: f64,
    pub checkpoint_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::simulated()
    }
}

impl TrainConfig {
    pub fn simulated() -> Self {
        TrainConfig {
            rays_per_iter: 1024,
            depth_samples: 256,
            batch_objects: 2,
            constraint_count: 4,
            lr: 0.005,
            lr_drop: None,
            epochs: 500,
            max_iterations: None,
            seed: 0,
            pdf_floor: 1e-3,
            checkpoint_every_epochs: 50,
        }
    }

    pub fn experimental() -> Self {
        TrainConfig {
            rays_per_iter: 3096,
            depth_samples: 64,
            constraint_count: 6,
            lr_drop: Some(LrDrop {
                factor: 0.1,
                epoch: 1000,
            }),
            epochs: 1500,
            ..TrainConfig::simulated()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("trainer.{m}")));
        if self.rays_per_iter == 0 {
            return bad("rays_per_iter must be >= 1");
        }
        if self.depth_samples < 2 {
            return bad("depth_samples must be >= 2");
        }
        if self.batch_objects == 0 || self.constraint_count == 0 || self.epochs == 0 {
            return bad("batch_objects, constraint_count and epochs must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let Some(d) = self.lr_drop {
            if !(d.factor > 0.0 && d.factor <= 1.0) {
                return bad("lr_drop.factor must be in (0, 1]");
            }
        }
        if !(self.pdf_floor > 0.0) {
            return bad("pdf_floor must be positive");
        }
        if self.checkpoint_every_epochs == 0 {
            return bad("checkpoint_every_epochs must be >= 1");
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, n_objects: usize) -> usize {
        n_objects.div_ceil(self.batch_objects)
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self.lr_drop {
            Some(d) if epoch >= d.epoch => self.lr * d.factor,
            _ => self.lr,
        }
    }
}

/// A uniformly random `m`-subset of `0..k`, sorted.
pub fn select_constraints(k: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m == 0 || m > k {
        return Err(Error::InsufficientViews { needed: m, found: k });
    }
    let mut idx = index::sample(rng, k, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Per-image pixel distributions proportional to `|∇I| + ε`.
#[derive(Clone, Debug)]
pub struct RaySampler {
    /// Cumulative, normalized per image.
    cdfs: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    cols: usize,
}

impl RaySampler {
    /// Gradient magnitudes are summed over the stack's channels;
    /// `ε = floor · mean magnitude` (1 for a constant image).
    pub fn new(stack: &ProjectionStack, floor: f64) -> Result<Self> {
        stack.validate()?;
        let (_, cols) = stack.detector_dims();
        let mut cdfs = Vec::with_capacity(stack.len());
        let mut probs = Vec::with_capacity(stack.len());
        for im in &stack.images {
            let mut mag = im.attenuation.gradient_magnitude().data;
            if let Some(p) = &im.phase {
                mag.iter_mut().zip(p.gradient_magnitude().data).for_each(|(a, b)| *a += b);
            }
            let mean = mag.iter().sum::<f64>() / mag.len() as f64;
            let eps = if mean > 0.0 { floor * mean } else { 1.0 };
            let total: f64 = mag.iter().map(|m| m + eps).sum();
            let p: Vec<f64> = mag.iter().map(|m| (m + eps) / total).collect();
            let mut acc = 0.0;
            let cdf = p
                .iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect();
            probs.push(p);
            cdfs.push(cdf);
        }
        Ok(RaySampler { cdfs, probs, cols })
    }

    pub fn probabilities(&self, view: usize) -> &[f64] {
        &self.probs[view]
    }

    /// `(row, col)` drawn from image `view`.
    pub fn draw_pixel(&self, view: usize, rng: &mut impl Rng) -> (usize, usize) {
        let cdf = &self.cdfs[view];
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        let p = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        (p / self.cols, p % self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    /// Measured contrast per channel, in the order requested.
    pub measured: Vec<f64>,
}

/// `n` rays: a view uniformly at random, then a pixel from its PDF.
pub fn sample_rays(
    stack: &ProjectionStack,
    sampler: &RaySampler,
    n: usize,
    channels: &[Channel],
    rng: &mut impl Rng,
) -> Result<Vec<RaySample>> {
    for &c in channels {
        if !stack.has_channel(c) {
            return Err(Error::ChannelAbsent(c));
        }
    }
    Ok((0..n)
        .map(|_| {
            let view = rng.random_range(0..stack.len());
            let (row, col) = sampler.draw_pixel(view, rng);
            let im = &stack.images[view];
            let measured = channels
                .iter()
                .map(|&c| im.channel(c).expect("checked").get(row, col))
                .collect();
            RaySample { view, row, col, measured }
        })
        .collect())
}

/// One uniform draw in each of `n` equal sub-intervals.
pub fn sample_depths(t_near: f64, t_far: f64, n: usize, rng: &mut impl Rng) -> Result<DepthSamples> {
    if !(t_far > t_near) || n < 2 {
        return Err(Error::Degenerate(format!("depth interval [{t_near}, {t_far}] with {n} samples")));
    }
    let step = (t_far - t_near) / n as f64;
    let t = (0..n)
        .map(|j| (t_near + (j as f64 + rng.random::<f64>()) * step).min(t_far))
        .collect();
    DepthSamples::new(t, t_near, t_far)
}

/// Mean over rays of the squared error summed over channels.
pub fn loss(predicted: &[Vec<f64>], measured: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != measured.len() || predicted.iter().zip(measured).any(|(p, m)| p.len() != m.len()) {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: vec![predicted.len()],
            right: vec![measured.len()],
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("ray list"));
    }
    let s: f64 = predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| p.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(s / predicted.len() as f64)
}

/// Result of one object's forward/backward pass.
struct ObjectStep<S> {
    loss: f64,
    grads: std::collections::BTreeMap<String, Tensor<S>>,
    off_constraint_rays: usize,
}

/// Loss and parameter gradients for one stack with a given random stream.
fn object_step<S: Scalar>(
    model: &FieldModel<S>,
    stack: &ProjectionStack,
    sampler: &RaySampler,
    bounds: &Aabb,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<ObjectStep<S>> {
    let constraints = select_constraints(stack.len(), cfg.constraint_count, rng)?;
    let channels = model.channels();
    let samples = sample_rays(stack, sampler, cfg.rays_per_iter, &channels, rng)?;
    let mut rays = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * channels.len());
    // Rays that miss the reconstruction box predict zero contrast.
    let mut missed = 0.0;
    for s in &samples {
        let ray: Ray = stack.images[s.view].view.ray_for_pixel(s.row, s.col, bounds)?;
        match ray_aabb_intersect(&ray, bounds) {
            Some((t0, t1)) if t1 > t0 => {
                rays.push((ray, sample_depths(t0, t1, cfg.depth_samples, rng)?));
                targets.extend(s.measured.iter().map(|&v| S::of(v)));
            }
            _ => missed += s.measured.iter().map(|v| v * v).sum::<f64>(),
        }
    }
    let off_constraint_rays = samples.iter().filter(|s| !constraints.contains(&s.view)).count();
    let n = samples.len() as f64;
    if rays.is_empty() {
        return Ok(ObjectStep {
            loss: missed / n,
            grads: Default::default(),
            off_constraint_rays,
        });
    }
    let mut g = Graph::new();
    let images: Vec<_> = constraints.iter().map(|&i| &stack.images[i]).collect();
    let enc = model.encode_graph(&mut g, &images)?;
    let pred = model.render_graph(&mut g, &enc, &rays)?;
    let target = g.constant(Tensor::new(vec![rays.len(), channels.len()], targets)?)?;
    let mse = g.mse(pred, target)?;
    // Rescale the mean over hit rays to a mean over all sampled rays.
    let frac = S::of(rays.len() as f64 / n);
    let l = g.scale(mse, frac)?;
    let grads = g.backward(l)?.params();
    Ok(ObjectStep {
        loss: g.value(l).data()[0].as_f64() + missed / n,
        grads,
        off_constraint_rays,
    })
}

/// Where training writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Receives one `iteration,epoch,loss` line per step.
    pub loss_log: Option<PathBuf>,
    /// Receives `epoch_NNNN.ckpt` on schedule and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport<S> {
    pub model: FieldModel<S>,
    pub loss_history: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Sampled rays per iteration that came from non-constraint views.
    pub off_constraint_rays: Vec<usize>,
    pub iterations: usize,
}

pub fn train<S: Scalar>(
    dataset: &[ProjectionStack],
    cfg: &TrainConfig,
    model: FieldModel<S>,
    grid: &GridSpec,
    outputs: &TrainOutputs,
) -> Result<TrainReport<S>> {
    cfg.validate()?;
    grid.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    for s in dataset {
        if s.len() < cfg.constraint_count + 1 {
            return Err(Error::InsufficientViews {
                needed: cfg.constraint_count + 1,
                found: s.len(),
            });
        }
    }
    let samplers: Vec<RaySampler> = dataset
        .iter()
        .map(|s| RaySampler::new(s, cfg.pdf_floor))
        .collect::<Result<_>>()?;
    let bounds = grid.bounds();
    let per_epoch = cfg.iterations_per_epoch(dataset.len());
    let total = cfg
        .max_iterations
        .map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));

    let mut log = match &outputs.loss_log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut model = model;
    let mut adam = AdamState::new(cfg.lr);
    let mut report = TrainReport {
        model: model.clone(),
        loss_history: Vec::with_capacity(total),
        epoch_losses: Vec::new(),
        off_constraint_rays: Vec::with_capacity(total),
        iterations: 0,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut epoch_sum = 0.0;
    let mut best = f64::INFINITY;

    for it in 0..total {
        let epoch = it / per_epoch;
        let pos = it % per_epoch;
        if pos == 0 {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng::domain_stream(cfg.seed, DOMAIN_EPOCH, epoch as u64));
        }
        adam.lr = cfg.lr_at_epoch(epoch);
        let slots: Vec<usize> = (0..cfg.batch_objects)
            .map(|b| order[(pos * cfg.batch_objects + b) % dataset.len()])
            .collect();
        let steps: Vec<ObjectStep<S>> = slots
            .par_iter()
            .enumerate()
            .map(|(b, &obj)| {
                let mut r = rng::domain_stream(cfg.seed, DOMAIN_SLOT, (it * cfg.batch_objects + b) as u64);
                object_step(&model, &dataset[obj], &samplers[obj], &bounds, cfg, &mut r)
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    iteration: it,
                    loss: f64::NAN,
                },
                other => other,
            })?;
        let mut acc = GradAccumulator::new();
        let mut loss_sum = 0.0;
        let mut off = 0;
        for s in &steps {
            acc.add(&s.grads)?;
            loss_sum += s.loss;
            off += s.off_constraint_rays;
        }
        let loss = loss_sum / steps.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, loss });
        }
        let grads = acc.finish::<S>(1.0 / steps.len() as f64);
        // Parameters no object touched (all rays missed) get zero gradients.
        let zero: std::collections::BTreeMap<_, _> = model
            .params
            .iter()
            .filter(|(n, _)| !grads.contains_key(*n))
            .map(|(n, p)| (n.to_string(), Tensor::zeros(p.shape())))
            .collect();
        model.params.accumulate_grads(&grads)?;
        model.params.accumulate_grads(&zero)?;
        adam_step(&mut model.params, &mut adam)?;

        report.loss_history.push(loss);
        report.off_constraint_rays.push(off);
        report.iterations = it + 1;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{it},{epoch},{loss:e}")?;
        }
        epoch_sum += loss;
        let last_of_epoch = pos + 1 == per_epoch || it + 1 == total;
        if last_of_epoch {
            let mean = epoch_sum / (pos + 1) as f64;
            epoch_sum = 0.0;
            report.epoch_losses.push(mean);
            if let Some(dir) = &outputs.checkpoint_dir {
                let state = serde_json::json!({
                    "iteration": it + 1,
                    "epoch": epoch,
                    "epoch_loss": mean,
                    "seed": cfg.seed,
                });
                if (epoch + 1) % cfg.checkpoint_every_epochs == 0 {
                    write_checkpoint(dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), &model, state.clone())?;
                }
                if mean < best {
                    write_checkpoint(dir.join("best.ckpt"), &model, state)?;
                }
            }
            best = best.min(mean);
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    report.model = model;
    Ok(report)
}

/// Reconstructs a volume conditioned on the views `indices` of `stack`.
pub fn infer<S: Scalar>(
    model: &FieldModel<S>,
    stack: &ProjectionStack,
    indices: &[usize],
    grid: &GridSpec,
    chunk: usize,
) -> Result<RefractiveVolume> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if indices.is_empty() || sorted.len() != indices.len() || indices.iter().any(|&i| i >= stack.len()) {
        return Err(Error::InvalidIndices {
            indices: indices.to_vec(),
            views: stack.len(),
        });
    }
    let images: Vec<_> = indices.iter().map(|&i| stack.images[i].clone()).collect();
    let cs = ConstraintSet::encode(model, &images)?;
    render_volume(model, &cs, grid, chunk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::image::Image;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::projector::{equally_spaced_angles, project_dataset, ContrastImage, Detector, ProjectorConfig};

    #[test]
    fn presets_match_protocol() {
        let s = TrainConfig::simulated();
        assert_eq!((s.rays_per_iter, s.depth_samples, s.batch_objects, s.constraint_count), (1024, 256, 2, 4));
        assert_eq!((s.lr, s.epochs), (0.005, 500));
        let e = TrainConfig::experimental();
        assert_eq!((e.rays_per_iter, e.depth_samples, e.constraint_count, e.epochs), (3096, 64, 6, 1500));
        assert_eq!(e.iterations_per_epoch(1000), 500);
        assert_eq!(e.lr_at_epoch(999), 0.005);
        assert!((e.lr_at_epoch(1000) - 0.0005).abs() < 1e-18);
        assert_eq!(s.lr_at_epoch(5000), 0.005);
        assert_eq!(s.iterations_per_epoch(5), 3);
    }

    #[test]
    fn constraint_selection() {
        let mut r = rng::seeded(1);
        assert_eq!(select_constraints(5, 5, &mut r).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_constraints(5, 1, &mut r).unwrap().len(), 1);
        assert!(select_constraints(3, 4, &mut r).is_err());
        let mut counts = [0usize; 8];
        for _ in 0..10_000 {
            for i in select_constraints(8, 4, &mut r).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.5).abs() <= 0.02, "{counts:?}");
        }
    }

    fn image_stack(imgs: Vec<Image>) -> ProjectionStack {
        let det = Detector {
            rows: imgs[0].rows,
            cols: imgs[0].cols,
            pixel_size: 1e-6,
        };
        let images = imgs
            .into_iter()
            .enumerate()
            .map(|(i, attenuation)| ContrastImage {
                attenuation,
                phase: None,
                view: det.view(0.1 * i as f64, i).unwrap(),
            })
            .collect();
        ProjectionStack::new(images, 18.0).unwrap()
    }

    #[test]
    fn constant_image_gives_uniform_pdf() {
        let s = image_stack(vec![Image::from_vec(4, 4, vec![2.0; 16])]);
        let rs = RaySampler::new(&s, 1e-3).unwrap();
        assert!(rs.probabilities(0).iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn edge_pixels_are_drawn_per_pdf() {
        let mut img = Image::zeros(8, 8);
        for i in 0..8 {
            for j in 4..8 {
                img.set(i, j, 1.0);
            }
        }
        let s = image_stack(vec![img]);
        let rs = RaySampler::new(&s, 1e-3).unwrap();
        let p = rs.probabilities(0).to_vec();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = 20_000;
        let mut counts = vec![0usize; 64];
        let mut r = rng::seeded(3);
        for ray in sample_rays(&s, &rs, n, &[Channel::Attenuation], &mut r).unwrap() {
            counts[ray.row * 8 + ray.col] += 1;
            assert_eq!(ray.measured[0], if ray.col >= 4 { 1.0 } else { 0.0 });
        }
        assert!(counts[3] + counts[4] > 100 * (counts[0] + 1));
        // Chi-square over cells with expected count >= 5, pooling the rest.
        let (mut chi2, mut dof, mut pooled_e, mut pooled_o) = (0.0, 0usize, 0.0, 0.0);
        for (c, &pi) in counts.iter().zip(&p) {
            let e = pi * n as f64;
            if e >= 5.0 {
                chi2 += (*c as f64 - e).powi(2) / e;
                dof += 1;
            } else {
                pooled_e += e;
                pooled_o += *c as f64;
            }
        }
        if pooled_e > 0.0 {
            chi2 += (pooled_o - pooled_e).powi(2) / pooled_e.max(1e-12);
            dof += 1;
        }
        // 1% critical value of chi-square with 16 degrees of freedom.
        assert_eq!(dof - 1, 16);
        assert!(chi2 < 32.0, "chi2 {chi2}");
    }

    #[test]
    fn stratified_depths() {
        let mut r = rng::seeded(4);
        let d = sample_depths(1.0, 3.0, 2, &mut r).unwrap();
        assert!(d.t()[0] < 2.0 && d.t()[1] >= 2.0);
        let mut total = 0.0;
        for _ in 0..200 {
            total += sample_depths(0.0, 1.0, 256, &mut r).unwrap().deltas().iter().sum::<f64>();
        }
        assert!((total / 200.0 - 1.0).abs() < 0.01);
        let a = sample_depths(0.0, 1.0, 16, &mut rng::seeded(9)).unwrap();
        let b = sample_depths(0.0, 1.0, 16, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_depths(1.0, 1.0, 4, &mut r).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(loss(&[vec![3.0]], &[vec![1.0]]).unwrap(), 4.0);
        assert!(loss(&[vec![3.0]], &[]).is_err());
        let mut r = rng::seeded(5);
        let p: Vec<Vec<f64>> = (0..50).map(|_| vec![r.random(), r.random()]).collect();
        let m: Vec<Vec<f64>> = (0..50).map(|_| vec![r.random(), r.random()]).collect();
        let mut brute = 0.0;
        for i in 0..50 {
            for c in 0..2 {
                brute += (p[i][c] - m[i][c]) * (p[i][c] - m[i][c]);
            }
        }
        assert!((loss(&p, &m).unwrap() - brute / 50.0).abs() < 1e-12);
    }

    fn tiny() -> (Vec<ProjectionStack>, FieldModel<f64>, GridSpec, TrainConfig) {
        let spec = PhantomSpec::scaled(8, 0.0625);
        let grid = spec.grid;
        let angles = equally_spaced_angles(4, 0.0, 140.0);
        let pc = ProjectorConfig {
            n_depth: 16,
            ..Default::default()
        };
        let data: Vec<ProjectionStack> = (0..3)
            .map(|k| {
                let mut sp = spec.clone();
                sp.seed = k;
                let p = generate_phantom(&sp).unwrap();
                project_dataset(&p.volume, &angles, 18.0, &pc).unwrap()
            })
            .collect();
        let fc = FieldConfig {
            encoding_levels: 2,
            mlp_width: 8,
            shared_blocks: 1,
            head_blocks: 1,
            latent_dim: 4,
            encoder_stages: 2,
            stage_channels: vec![2, 2],
            scene_radius: grid.bounds().bounding_radius(),
            ..Default::default()
        };
        let model = FieldModel::new(fc, 18.0, 7).unwrap();
        let tc = TrainConfig {
            rays_per_iter: 16,
            depth_samples: 6,
            constraint_count: 2,
            epochs: 2,
            seed: 11,
            ..TrainConfig::simulated()
        };
        (data, model, grid, tc)
    }

    #[test]
    fn training_is_reproducible_and_samples_off_constraint_views() {
        let (data, model, grid, tc) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            loss_log: Some(dir.path().join("loss.csv")),
            checkpoint_dir: Some(dir.path().join("ckpt")),
        };
        let a = train(&data, &tc, model.clone(), &grid, &outputs).unwrap();
        let b = train(&data, &tc, model.clone(), &grid, &TrainOutputs::default()).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.iterations, 4);
        assert!(a.off_constraint_rays.iter().all(|&n| n > 0));
        assert!(a.loss_history.iter().all(|&l| l >= 0.0 && l.is_finite()));
        let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().next().unwrap().starts_with("0,0,"));
        assert!(dir.path().join("ckpt/best.ckpt").exists());
    }

    #[test]
    fn training_rejects_too_few_views() {
        let (data, model, grid, mut tc) = tiny();
        tc.constraint_count = 4;
        assert!(matches!(
            train(&data, &tc, model, &grid, &TrainOutputs::default()),
            Err(Error::InsufficientViews { needed: 5, found: 4 })
        ));
    }

    #[test]
    fn infer_checks_indices_and_is_permutation_invariant() {
        let (data, model, grid, _) = tiny();
        assert!(matches!(infer(&model, &data[0], &[0, 9], &grid, 64), Err(Error::InvalidIndices { .. })));
        assert!(infer(&model, &data[0], &[1, 1], &grid, 64).is_err());
        let a = infer(&model, &data[0], &[0, 2], &grid, 64).unwrap();
        let b = infer(&model, &data[0], &[2, 0], &grid, 64).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
        let c = infer(&model, &data[0], &[1, 3], &grid, 64).unwrap();
        assert_ne!(a.beta, c.beta);
        assert!(a.is_finite() && a.is_non_negative());
    }
}
