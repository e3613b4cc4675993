use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparseview::io::{read_projections, read_volume};

const SMALL_CONFIG: &str = r#"{
  "dataset_size": 2,
  "phantom": {
    "grid": {"dims": [16, 16, 16], "voxel_size": 3.2e-6, "origin": {"x": -2.4e-5, "y": -2.4e-5, "z": -2.4e-5}},
    "cylinder_radius": 6.0,
    "cylinder_height": 16.0,
    "semi_axis_range": [2.4, 9.6]
  },
  "projector": {"n_depth": 32},
  "sart": {
    "iterations": 3,
    "n_depth": 32,
    "grid": {"dims": [16, 16, 16], "voxel_size": 3.2e-6, "origin": {"x": -2.4e-5, "y": -2.4e-5, "z": -2.4e-5}}
  },
  "field": {
    "encoding_levels": 3, "mlp_width": 8, "shared_blocks": 1, "head_blocks": 1,
    "latent_dim": 8, "encoder_stages": 2, "stage_channels": [4, 4], "scene_radius": 4.4e-5
  },
  "trainer": {"rays_per_iter": 16, "depth_samples": 8, "batch_objects": 1, "constraint_count": 2, "epochs": 2},
  "metrics": {"mask": {"inner": 0.0, "outer": 6.0}, "render_chunk": 512}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparseview"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    }
    bin().current_dir(dir).arg("--config").arg(&cfg).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn phantom_and_projections(dir: &Path) -> (PathBuf, PathBuf) {
    ok(dir, &["phantom-gen", "--out", "p.vol"]);
    ok(dir, &["project", "--in", "p.vol", "--angles", "8x0:140", "--out", "p.prj"]);
    (dir.join("p.vol"), dir.join("p.prj"))
}

#[test]
fn phantom_then_project_follows_the_simulated_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let (vol, prj) = phantom_and_projections(tmp.path());
    let (v, header) = read_volume(&vol).unwrap();
    assert_eq!(v.grid.dims, [16, 16, 16]);
    assert_eq!(header.energy_kev, 18.0);
    let stack = read_projections(&prj).unwrap();
    assert_eq!(stack.len(), 8);
    for (i, a) in stack.angles().iter().enumerate() {
        assert!((a.to_degrees() - 20.0 * i as f64).abs() < 1e-9);
    }
    for f in ["p.vol.manifest.json", "p.prj.manifest.json"] {
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join(f)).unwrap()).unwrap();
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(m["version"].is_string() && m["seed"].is_u64());
    }
}

#[test]
fn eval_of_identical_volumes_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (vol, _) = phantom_and_projections(tmp.path());
    let v = vol.to_str().unwrap();
    let o = ok(tmp.path(), &["eval", "--cand", v, "--ref", v, "--out", "report.json"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["l2"], 0.0);
    assert_eq!(r["dssim"], 0.0);
    assert!(tmp.path().join("report.json.manifest.json").exists());
}

#[test]
fn seed_changes_the_phantom() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--seed", "1", "phantom-gen", "--out", "a.vol"]);
    ok(tmp.path(), &["--seed", "1", "phantom-gen", "--out", "b.vol"]);
    ok(tmp.path(), &["--seed", "2", "phantom-gen", "--out", "c.vol"]);
    let read = |n: &str| std::fs::read(tmp.path().join(n)).unwrap();
    assert_eq!(read("a.vol"), read("b.vol"));
    assert_ne!(read("a.vol"), read("c.vol"));
}

#[test]
fn train_then_infer_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, prj) = phantom_and_projections(tmp.path());
    ok(tmp.path(), &["--workers", "1", "train", "--out", "run"]);
    let log = std::fs::read_to_string(tmp.path().join("run/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let ckpt = tmp.path().join("run/final.ckpt");
    let (c, p) = (ckpt.to_str().unwrap(), prj.to_str().unwrap());
    for out in ["r1.vol", "r2.vol"] {
        ok(tmp.path(), &["infer", "--ckpt", c, "--in", p, "--indices", "0,3,5,7", "--out", out]);
    }
    let a = std::fs::read(tmp.path().join("r1.vol")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("r2.vol")).unwrap());
    assert!(read_volume(tmp.path().join("r1.vol")).unwrap().0.is_finite());
    let o = ok(tmp.path(), &["combos", "--ckpt", c, "--in", p, "--ref", "p.vol", "--k", "6", "--out", "combos.csv"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("28 subsets"));
    let csv = std::fs::read_to_string(tmp.path().join("combos.k6.csv")).unwrap();
    assert_eq!(csv.lines().count(), 29);
    assert!(tmp.path().join("combos.k6.summary.csv").exists());
}

#[test]
fn sart_writes_a_volume() {
    let tmp = tempfile::tempdir().unwrap();
    phantom_and_projections(tmp.path());
    ok(tmp.path(), &["sart", "--in", "p.prj", "--out", "s.vol"]);
    let (v, _) = read_volume(tmp.path().join("s.vol")).unwrap();
    assert!(v.is_finite());
    assert!(v.beta.iter().any(|&b| b != 0.0));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(tmp.path(), &["gradcheck", "--params", "10"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r[0]["dtype"], "f64");
    assert_eq!(r[1]["dtype"], "f32");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["eval", "--bogus"]).output().unwrap().status.code(), Some(1));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"trainer": {"epoch": 3}, "extra": true}"#).unwrap();
    let o = bin().arg("--config").arg(&bad).args(["phantom-gen", "--out", "x.vol"]).current_dir(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trainer.epoch") && err.contains("extra"), "{err}");

    std::fs::write(tmp.path().join("junk.vol"), b"not a volume at all").unwrap();
    let o = run(tmp.path(), &["eval", "--cand", "junk.vol", "--ref", "junk.vol"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(tmp.path(), &["eval", "--cand", "missing.vol", "--ref", "missing.vol"]);
    assert_eq!(o.status.code(), Some(2));
}
