//! End-to-end gradient check of encode → field → render → loss against
//! central finite differences, on a miniature model.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{DepthSamples, FieldConfig, FieldModel};
use crate::geometry::{ray_aabb_intersect, GridSpec, Ray};
use crate::nnkit::{Graph, ParamStore, Scalar, Tensor};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::projector::{project_dataset, ProjectionStack, ProjectorConfig};
use crate::rng;
use crate::trainer::sample_depths;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub params_checked: usize,
    pub views: usize,
    pub rays: usize,
    pub depth_samples: usize,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            params_checked: 100,
            views: 2,
            rays: 8,
            depth_samples: 4,
            step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub dtype: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Width-8 MLP, `D = 8` encoder.
pub fn miniature_config(grid: &GridSpec) -> FieldConfig {
    FieldConfig {
        encoding_levels: 4,
        mlp_width: 8,
        shared_blocks: 1,
        head_blocks: 1,
        latent_dim: 8,
        encoder_stages: 2,
        stage_channels: vec![4, 4],
        output_channels: 2,
        output_scale: vec![1e-7, 1e-8],
        input_scale: 1.0,
        scene_radius: grid.bounds().bounding_radius(),
    }
}

struct Problem {
    stack: ProjectionStack,
    rays: Vec<(Ray, DepthSamples)>,
    targets: Vec<f64>,
}

fn problem(opts: &GradcheckOptions) -> Result<(Problem, GridSpec)> {
    let mut spec = PhantomSpec::scaled(16, 0.12);
    spec.seed = opts.seed;
    let phantom = generate_phantom(&spec)?;
    let grid = spec.grid;
    let angles: Vec<f64> = (0..opts.views)
        .map(|i| std::f64::consts::PI * i as f64 / opts.views as f64)
        .collect();
    let cfg = ProjectorConfig {
        n_depth: 32,
        ..ProjectorConfig::default()
    };
    let stack = project_dataset(&phantom.volume, &angles, spec.material.energy_kev, &cfg)?;
    let bounds = grid.bounds();
    let mut r = rng::stream(opts.seed, 1);
    let (rows, cols) = stack.detector_dims();
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    let mut attempts = 0;
    while rays.len() < opts.rays {
        attempts += 1;
        if attempts > 1000 * opts.rays.max(1) {
            return Err(Error::Degenerate("no detector pixel sees the volume".into()));
        }
        let view = r.random_range(0..stack.len());
        let (row, col) = (r.random_range(0..rows), r.random_range(0..cols));
        let im = &stack.images[view];
        let ray = im.view.ray_for_pixel(row, col, &bounds)?;
        if let Some((t0, t1)) = ray_aabb_intersect(&ray, &bounds).filter(|(a, b)| b > a) {
            rays.push((ray, sample_depths(t0, t1, opts.depth_samples, &mut r)?));
            targets.push(im.phase.as_ref().expect("both channels projected").get(row, col));
            targets.push(im.attenuation.get(row, col));
        }
    }
    Ok((Problem { stack, rays, targets }, grid))
}

fn loss_graph<S: Scalar>(model: &FieldModel<S>, p: &Problem) -> Result<(Graph<S>, crate::nnkit::Var)> {
    let mut g = Graph::new();
    let images: Vec<_> = p.stack.images.iter().collect();
    let enc = model.encode_graph(&mut g, &images)?;
    let pred = model.render_graph(&mut g, &enc, &p.rays)?;
    let t = g.constant(Tensor::from_f64(&[p.rays.len(), 2], &p.targets)?)?;
    let l = g.mse(pred, t)?;
    Ok((g, l))
}

fn loss_value(model: &FieldModel<f64>, p: &Problem) -> Result<f64> {
    let (g, l) = loss_graph(model, p)?;
    Ok(g.value(l).data()[0])
}

/// Jitters every parameter so that no ReLU input sits exactly on its kink
/// (zero-initialized biases on blank image regions would).
fn jitter(params: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::stream(seed, 2);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        for v in params.get_mut(&n).expect("listed").data_mut().iter_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
}

/// Analytic gradients in precision `S` against central differences of the
/// same loss evaluated in f64 at the same point, over randomly chosen
/// scalar parameters. Relative error uses `max(|a|, |fd|, 1e-6·max|a|)`.
pub fn pipeline_gradcheck<S: Scalar>(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (prob, grid) = problem(opts)?;
    let mut reference = FieldModel::<f64>::new(miniature_config(&grid), prob.stack.energy_kev, opts.seed)?;
    jitter(&mut reference.params, opts.seed);
    let model = FieldModel::<S> {
        config: reference.config.clone(),
        params: reference.params.cast(),
        energy_kev: reference.energy_kev,
    };
    let (g, l) = loss_graph(&model, &prob)?;
    let analytic = g.backward(l)?.params();
    let scale = analytic
        .values()
        .flat_map(|t| t.to_f64_vec())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let flat: Vec<(&String, usize)> = analytic
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n, i)))
        .collect();
    let mut r = rng::stream(opts.seed, 3);
    let picks = rand::seq::index::sample(&mut r, flat.len(), opts.params_checked.min(flat.len()));
    let mut report = GradcheckReport {
        dtype: S::DTYPE,
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for k in picks {
        let (name, i) = flat[k];
        let x = reference.params.get(name)?.data()[i];
        let h = opts.step * x.abs().max(1.0);
        let mut m = reference.clone();
        m.params.get_mut(name)?.data_mut()[i] = x + h;
        let up = loss_value(&m, &prob)?;
        m.params.get_mut(name)?.data_mut()[i] = x - h;
        let down = loss_value(&m, &prob)?;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[name].data()[i].as_f64();
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6 * scale);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_param = name.clone();
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
