use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shadowfield::field::{
    load_checkpoint, save_checkpoint, softplus_inv, AnyField, GridField, OpacityField,
};
use shadowfield::geometry::Aabb;
use shadowfield::io;
use shadowfield::recon::EvalReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shadowfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast settings shared by the tests.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "gen": {"validation_views": 1, "gt_mesh_resolution": 32, "rig": {"gt_light_size": 128, "light_size": 32}},
  "field": {"cells": 8},
  "train": {"samples": 16, "lr": 0.05},
  "output": {"checkpoint_every": 1, "render_every": 1},
  "mesh": {"resolution": 24},
  "eval": {"points": 300, "max_iters": 20},
  "render": {"samples": 16}
}"#,
    )
    .unwrap();
    path
}

fn gen_small(dir: &Path, name: &str, config: &Path) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "--config",
        s(config),
        "--seed",
        "7",
        "gen",
        "cuboid",
        "--views",
        "3",
        "--size",
        "12x12",
        "--out",
        s(&out),
    ]);
    out
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn gen_writes_requested_views_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = gen_small(tmp.path(), "a", &cfg);
    let b = gen_small(tmp.path(), "b", &cfg);
    let ta = tree_bytes(&a);
    assert_eq!(ta, tree_bytes(&b));
    let masks = ta.keys().filter(|p| p.starts_with("masks")).count();
    assert_eq!(masks, 4, "3 training views plus 1 validation view");
    assert!(ta.contains_key(Path::new("manifest.json")));
}

#[test]
fn unknown_scene_is_bad_input_and_lists_options() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen", "teapot", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cuboid") && err.contains("bunny"), "{err}");
}

#[test]
fn malformed_flags_are_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let o = s(tmp.path());
    assert_eq!(
        run(&["gen", "cuboid", "--out", o, "--size", "12"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["gen", "cuboid", "--out", o, "--views", "many"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["mesh", "missing.json", "--out", o]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let ds = gen_small(tmp.path(), "ds", &cfg);
    let run_dir = tmp.path().join("run");
    ok(&[
        "--config",
        s(&cfg),
        "train",
        s(&ds),
        "--epochs",
        "0",
        "--out",
        s(&run_dir),
    ]);
    let field = load_checkpoint(&run_dir.join("checkpoint.json")).unwrap();
    let raw = softplus_inv(0.01);
    assert!(field.params().iter().all(|&p| p == raw));
    assert!(io::read_loss_csv(&run_dir.join("loss.csv"))
        .unwrap()
        .is_empty());
}

#[test]
fn training_writes_artifacts_and_resume_matches_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let ds = gen_small(tmp.path(), "ds", &cfg);
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    ok(&[
        "--config",
        s(&cfg),
        "train",
        s(&ds),
        "--epochs",
        "3",
        "--out",
        s(&full),
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "train",
        s(&ds),
        "--epochs",
        "2",
        "--out",
        s(&split),
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "train",
        s(&ds),
        "--epochs",
        "3",
        "--out",
        s(&split),
        "--resume",
    ]);

    for f in ["checkpoint.bin", "optim.bin", "loss.csv"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(split.join(f)).unwrap(),
            "{f}"
        );
    }
    let records = io::read_loss_csv(&full.join("loss.csv")).unwrap();
    assert_eq!(records.len(), 9);
    assert!(full.join("checkpoints/epoch_0002.json").exists());
    assert!(full.join("renders/epoch_0000/val_0000_depth.png").exists());
    assert!(full.join("renders/epoch_0002/val_0000_shadow.png").exists());
    assert!(full.join("config.json").exists());
}

#[test]
fn mesh_of_an_empty_field_is_empty_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("empty.json");
    let g = GridField::filled([4, 4, 4], Aabb::cube(1.0), -1000.0).unwrap();
    save_checkpoint(&AnyField::Grid(g), &ckpt).unwrap();
    let out = ok(&["mesh", s(&ckpt), "--res", "16", "--out", s(tmp.path())]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(io::read_obj(&tmp.path().join("mesh.obj"))
        .unwrap()
        .is_empty());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("mesh.json")).unwrap()).unwrap();
    assert_eq!(report["faces"], 0);
    assert_eq!(report["resolution"], 16);
}

fn ball_checkpoint(dir: &Path) -> PathBuf {
    let ckpt = dir.join("ball.json");
    let g = GridField::from_fn([16, 16, 16], Aabb::cube(1.0), |x| 20.0 * (0.5 - x.norm())).unwrap();
    save_checkpoint(&AnyField::Grid(g), &ckpt).unwrap();
    ckpt
}

#[test]
fn mesh_then_eval_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = ball_checkpoint(tmp.path());
    ok(&["mesh", s(&ckpt), "--res", "32", "--out", s(tmp.path())]);
    let mesh = tmp.path().join("mesh.obj");
    assert!(io::read_obj(&mesh).unwrap().faces.len() > 100);
    ok(&["eval", s(&mesh), s(&mesh), "--out", s(tmp.path())]);
    let report: EvalReport = io::read_json(&tmp.path().join("eval.json")).unwrap();
    assert!(report.rmse < 1e-9, "rmse {}", report.rmse);
    assert_eq!(report.resolution, Some(32));
}

#[test]
fn eval_accepts_a_point_cloud() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = ball_checkpoint(tmp.path());
    ok(&["mesh", s(&ckpt), "--res", "32", "--out", s(tmp.path())]);
    let mesh = tmp.path().join("mesh.obj");
    let cloud = tmp.path().join("cloud.ply");
    io::write_ply_points(&cloud, &io::read_obj(&mesh).unwrap().vertices).unwrap();
    ok(&["eval", s(&mesh), s(&cloud), "--out", s(tmp.path())]);
    let report: EvalReport = io::read_json(&tmp.path().join("eval.json")).unwrap();
    // The cloud is the vertex set, not area-weighted samples, so only
    // sampling density separates them.
    assert!(report.rmse < 0.03, "rmse {}", report.rmse);
}

#[test]
fn renders_of_an_empty_field_and_disparity_convention() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let ds = gen_small(tmp.path(), "ds", &cfg);
    let ckpt = tmp.path().join("empty.json");
    let g = GridField::filled([4, 4, 4], Aabb::cube(2.0), -1000.0).unwrap();
    save_checkpoint(&AnyField::Grid(g), &ckpt).unwrap();
    let out = tmp.path().join("r");
    for kind in ["depth", "disparity"] {
        ok(&[
            "--config",
            s(&cfg),
            "render",
            s(&ckpt),
            "--dataset",
            s(&ds),
            "--index",
            "1",
            "--kind",
            kind,
            "--out",
            s(&out),
        ]);
        let map = io::read_pfm(&out.join(format!("view_0001_{kind}.pfm"))).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0), "{kind}");
        assert!(out.join(format!("view_0001_{kind}.png")).exists());
    }
    ok(&[
        "--config",
        s(&cfg),
        "render",
        s(&ckpt),
        "--dataset",
        s(&ds),
        "--kind",
        "shadow",
        "--out",
        s(&out),
    ]);
    assert!(out.join("val_0000_shadow.pfm").exists());
    let bad = run(&[
        "render",
        s(&ckpt),
        "--dataset",
        s(&ds),
        "--index",
        "99",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn depth_and_disparity_renders_are_reciprocal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let ds = gen_small(tmp.path(), "ds", &cfg);
    let ckpt = ball_checkpoint(tmp.path());
    let out = tmp.path().join("r");
    for kind in ["depth", "disparity"] {
        ok(&[
            "--config",
            s(&cfg),
            "render",
            s(&ckpt),
            "--dataset",
            s(&ds),
            "--index",
            "0",
            "--kind",
            kind,
            "--out",
            s(&out),
        ]);
    }
    let depth = io::read_pfm(&out.join("view_0000_depth.pfm")).unwrap();
    let disp = io::read_pfm(&out.join("view_0000_disparity.pfm")).unwrap();
    assert!(depth.data.iter().any(|&d| d > 0.0));
    for (d, q) in depth.data.iter().zip(&disp.data) {
        if *d > 0.0 {
            assert!((q * d - 1.0).abs() < 1e-6);
        } else {
            assert_eq!(*q, 0.0);
        }
    }
}
