//! `sparseview` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, configuration, file
//! schema), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sparseview::config::RunConfig;
use sparseview::field::FieldModel;
use sparseview::gradcheck::{pipeline_gradcheck, GradcheckOptions};
use sparseview::io::{read_checkpoint, write_checkpoint, write_projections, write_volume};
use sparseview::metrics::{combination_study, evaluate};
use sparseview::nnkit::Scalar;
use sparseview::phantom::generate_dataset;
use sparseview::projector::{parse_angle_spec, project_dataset, ProjectionStack};
use sparseview::sart::sart_reconstruct_stack;
use sparseview::trainer::{infer, train, TrainOutputs};
use sparseview::{generate_phantom, Error};

#[derive(Parser, Debug)]
#[command(name = "sparseview", version, about = "Sparse-view X-ray reconstruction toolkit")]
struct Cli {
    /// Run configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives fully sequential execution.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one phantom volume.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-project a volume.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        /// `Nxstart:stop` in degrees; defaults to the configured angles.
        #[arg(long)]
        angles: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// SART reconstruction of a projection stack.
    Sart {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the field model. Without `--in`, a synthetic dataset is
    /// generated from the configuration.
    Train {
        #[arg(long = "in", num_args = 1..)]
        input: Vec<PathBuf>,
        /// Output directory for the loss log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Reconstruct a volume from a checkpoint and constraint views.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated view indices; evenly spaced views by default.
        #[arg(long)]
        indices: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a candidate volume against a reference.
    Eval {
        #[arg(long)]
        cand: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer and score every constraint subset of a stack.
    Combos {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Subset size; the configured sizes by default.
        #[arg(long)]
        k: Option<usize>,
        /// CSV path; `.k<k>` is inserted before the extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full render-and-loss pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        params: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Marks an error as bad input (exit code 1).
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Invalid>()
            || matches!(
                c.downcast_ref::<Error>(),
                Some(
                    Error::InvalidConfig(_)
                        | Error::InvalidIndices { .. }
                        | Error::InsufficientViews { .. }
                        | Error::ChannelAbsent(_)
                        | Error::BadMagic { .. }
                        | Error::PayloadLength { .. }
                        | Error::Header(_)
                        | Error::Json(_)
                )
            )
    })
}

#[derive(Clone, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    config: &'a RunConfig,
    config_hash: String,
    seed: u64,
    version: &'static str,
}

struct Run {
    cfg: RunConfig,
    command: &'static str,
    inputs: Vec<InputRecord>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(bytes)
    }

    /// Writes `<out>.manifest.json` describing how `outputs` were made.
    fn manifest(&self, out: &Path, outputs: &[PathBuf]) -> Result<()> {
        let m = Manifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            inputs: self.inputs.clone(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            config: &self.cfg,
            config_hash: self.cfg.hash(),
            seed: self.cfg.phantom.seed,
            version: env!("CARGO_PKG_VERSION"),
        };
        let mut path = out.as_os_str().to_owned();
        path.push(".manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

fn stack_from(run: &mut Run, path: &Path) -> Result<ProjectionStack> {
    let bytes = run.input(path)?;
    Ok(sparseview::io::projections_from_bytes(&bytes)?)
}

fn volume_from(run: &mut Run, path: &Path) -> Result<sparseview::RefractiveVolume> {
    let bytes = run.input(path)?;
    Ok(sparseview::io::volume_from_bytes(&bytes)?.0)
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| invalid(format!("bad view index `{t}`"))))
        .collect()
}

fn evenly_spaced(k: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| i * k / m).collect()
}

fn with_k(out: &Path, k: usize, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}.k{k}{suffix}.{ext}"))
}

fn run_infer<S: Scalar>(ckpt: &Path, stack: &ProjectionStack, idx: &[usize], cfg: &RunConfig) -> Result<sparseview::RefractiveVolume> {
    let (model, _) = read_checkpoint::<S>(ckpt)?;
    Ok(infer(&model, stack, idx, &cfg.phantom.grid, cfg.metrics.render_chunk)?)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(invalid("--workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    let mut run = Run {
        cfg: cfg.clone(),
        command: "",
        inputs: Vec::new(),
    };
    if let Some(p) = &cli.config {
        run.input(p)?;
    }
    match cli.command {
        Command::PhantomGen { out } => {
            run.command = "phantom-gen";
            let p = generate_phantom(&cfg.phantom)?;
            write_volume(&out, &p.volume, cfg.energy_kev)?;
            run.manifest(&out, &[out.clone()])?;
        }
        Command::Project { input, angles, out } => {
            run.command = "project";
            let vol = volume_from(&mut run, &input)?;
            let spec = angles.unwrap_or_else(|| cfg.angles.clone());
            let angles = parse_angle_spec(&spec)?;
            run.cfg.angles = spec;
            let stack = project_dataset(&vol, &angles, cfg.energy_kev, &cfg.projector)?;
            write_projections(&out, &stack)?;
            run.manifest(&out, &[out.clone()])?;
        }
        Command::Sart { input, out } => {
            run.command = "sart";
            let stack = stack_from(&mut run, &input)?;
            let vol = sart_reconstruct_stack(&stack, &cfg.sart)?;
            write_volume(&out, &vol, stack.energy_kev)?;
            run.manifest(&out, &[out.clone()])?;
        }
        Command::Train { input, out, precision } => {
            run.command = "train";
            let dataset = if input.is_empty() {
                let angles = parse_angle_spec(&cfg.angles)?;
                generate_dataset(cfg.dataset_size, &cfg.phantom, cfg.phantom.seed)
                    .map(|p| Ok(project_dataset(&p?.volume, &angles, cfg.energy_kev, &cfg.projector)?))
                    .collect::<Result<Vec<_>>>()?
            } else {
                input.iter().map(|p| stack_from(&mut run, p)).collect::<Result<Vec<_>>>()?
            };
            let outputs = TrainOutputs {
                loss_log: Some(out.join("loss.log")),
                checkpoint_dir: Some(out.clone()),
            };
            std::fs::create_dir_all(&out)?;
            let final_path = out.join("final.ckpt");
            let grid = cfg.phantom.grid;
            match precision {
                Precision::F64 => {
                    let model = FieldModel::<f64>::new(cfg.field.clone(), cfg.energy_kev, cfg.trainer.seed)?;
                    let r = train(&dataset, &cfg.trainer, model, &grid, &outputs)?;
                    write_checkpoint(&final_path, &r.model, serde_json::json!({"iterations": r.iterations}))?;
                }
                Precision::F32 => {
                    let model = FieldModel::<f32>::new(cfg.field.clone(), cfg.energy_kev, cfg.trainer.seed)?;
                    let r = train(&dataset, &cfg.trainer, model, &grid, &outputs)?;
                    write_checkpoint(&final_path, &r.model, serde_json::json!({"iterations": r.iterations}))?;
                }
            }
            run.manifest(&out, &[out.join("loss.log"), final_path])?;
        }
        Command::Infer { ckpt, input, indices, out } => {
            run.command = "infer";
            run.input(&ckpt)?;
            let stack = stack_from(&mut run, &input)?;
            let idx = match indices {
                Some(s) => parse_indices(&s)?,
                None => evenly_spaced(stack.len(), cfg.trainer.constraint_count.min(stack.len())),
            };
            let (_, manifest) = read_checkpoint::<f64>(&ckpt)?;
            let vol = if manifest.dtype == "f32" {
                run_infer::<f32>(&ckpt, &stack, &idx, &cfg)?
            } else {
                run_infer::<f64>(&ckpt, &stack, &idx, &cfg)?
            };
            write_volume(&out, &vol, stack.energy_kev)?;
            run.manifest(&out, &[out.clone()])?;
        }
        Command::Eval { cand, reference, out } => {
            run.command = "eval";
            let c = volume_from(&mut run, &cand)?;
            let r = volume_from(&mut run, &reference)?;
            let report = evaluate(&c, &r, &cfg.metrics.mask)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(out) = out {
                std::fs::write(&out, &json)?;
                run.manifest(&out, &[out.clone()])?;
            }
        }
        Command::Combos { ckpt, input, reference, k, out } => {
            run.command = "combos";
            run.input(&ckpt)?;
            let stack = stack_from(&mut run, &input)?;
            let r = volume_from(&mut run, &reference)?;
            let (model, _) = read_checkpoint::<f64>(&ckpt)?;
            let sizes = k.map_or_else(|| cfg.metrics.combination_sizes.clone(), |k| vec![k]);
            let mut written = Vec::new();
            for k in sizes {
                let study = combination_study(&model, &stack, k, &r, &cfg.metrics.mask, cfg.metrics.render_chunk)?;
                let (rows, summary) = (with_k(&out, k, ""), with_k(&out, k, ".summary"));
                std::fs::write(&rows, study.to_csv())?;
                std::fs::write(&summary, study.summary_csv())?;
                println!(
                    "k={k}: {} subsets, dssim mean {:.4e}, spearman(separation, dssim) {}",
                    study.entries.len(),
                    study.dssim.mean,
                    study.spearman_separation_dssim.map_or("n/a".into(), |s| format!("{s:.3}"))
                );
                written.extend([rows, summary]);
            }
            run.manifest(&out, &written)?;
        }
        Command::Gradcheck { params, out } => {
            run.command = "gradcheck";
            let opts = GradcheckOptions {
                seed: cfg.trainer.seed,
                params_checked: params,
                ..GradcheckOptions::default()
            };
            let reports = vec![pipeline_gradcheck::<f64>(&opts)?, pipeline_gradcheck::<f32>(&opts)?];
            let json = serde_json::to_string_pretty(&reports)?;
            println!("{json}");
            if let Some(out) = &out {
                std::fs::write(out, &json)?;
                run.manifest(out, &[out.clone()])?;
            }
            let (tol64, tol32) = (1e-4, 1e-2);
            if reports[0].max_rel_error > tol64 || reports[1].max_rel_error > tol32 {
                anyhow::bail!("gradient check exceeded tolerance (f64 {tol64:e}, f32 {tol32:e})");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
