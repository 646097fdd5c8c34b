//! The subcommands, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use shadowfield::field::{load_checkpoint, save_checkpoint, AnyField};
use shadowfield::geometry::{Aabb, Camera, PoseRecord};
use shadowfield::io;
use shadowfield::recon::{
    bake_volume, evaluate_meshes, icp_rmse, marching_cubes, sample_points, Crop, EvalReport,
    PointCloud, TriangleMesh,
};
use shadowfield::renderer::RenderSettings;
use shadowfield::scenegen::{generate_dataset, load_dataset, resolve_scene, DatasetManifest};
use shadowfield::shadow::{predict_shadow_mask, DepthPass};
use shadowfield::supervision::{fit_from, LossRecord, TrainProgress, TrainingView};
use shadowfield::Map2;

use crate::config::Settings;
use crate::{BadInput, RenderKind};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const OPTIMIZER: &str = "optim.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const CONFIG: &str = "config.json";

/// Render a dataset of `scene` into `out`.
pub fn gen(settings: &Settings, scene: &str, out: &Path) -> Result<DatasetManifest> {
    let (source, gt) = resolve_scene(scene, settings.gen.mesh_height)?;
    let manifest = generate_dataset(&source, gt.as_ref(), &settings.gen, out)
        .with_context(|| format!("generating '{scene}' into {}", out.display()))?;
    eprintln!(
        "wrote {} training and {} validation views to {}",
        manifest.views.len(),
        manifest.validation.len(),
        out.display()
    );
    Ok(manifest)
}

fn render_settings(settings: &Settings) -> RenderSettings {
    RenderSettings {
        samples: settings.render.samples,
        jitter: false,
        seed: settings.seed,
    }
}

pub fn render_depth(
    field: &AnyField,
    camera: &Camera,
    settings: &Settings,
) -> shadowfield::Result<Map2<f64>> {
    Ok(DepthPass::render_detached(field, camera, &render_settings(settings))?.zbuffer)
}

pub fn render_shadow(
    field: &AnyField,
    camera: &Camera,
    light: &Camera,
    settings: &Settings,
) -> shadowfield::Result<Map2<f64>> {
    let light = match settings.train.shadow_map_size {
        Some(s) => light.resized(s, s)?,
        None => light.clone(),
    };
    Ok(predict_shadow_mask(
        field,
        camera,
        &light,
        &settings.comparison,
        &render_settings(settings),
    )?
    .binary)
}

fn write_validation_renders(
    dir: &Path,
    field: &AnyField,
    views: &[TrainingView],
    light: &Camera,
    settings: &Settings,
) -> shadowfield::Result<()> {
    fs::create_dir_all(dir)?;
    for v in views {
        let depth = render_depth(field, &v.camera, settings)?;
        io::write_depth_png16(&dir.join(format!("{}_depth.png", v.id)), &depth)?;
        let shadow = render_shadow(field, &v.camera, light, settings)?;
        io::write_mask_png(&dir.join(format!("{}_shadow.png", v.id)), &shadow)?;
    }
    Ok(())
}

/// What a training run leaves behind besides its files.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: AnyField,
    /// Every per-view loss, including those of earlier runs when resumed.
    pub records: Vec<LossRecord>,
    /// Mean loss of every epoch run by this invocation.
    pub epoch_loss: Vec<f64>,
}

/// Fit a field to the dataset in `dataset`, writing everything under `out`.
/// With `resume`, training continues from the checkpoint and optimizer
/// state in `out`.
pub fn train(
    settings: &Settings,
    dataset: &Path,
    out: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let ds =
        load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let validation = ds.validation_views()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&out.join(CONFIG), settings)?;

    let (mut field, mut progress, mut records) = if resume {
        let field =
            load_checkpoint(&out.join(CHECKPOINT)).context("resuming: reading checkpoint")?;
        let progress = io::read_train_progress(&out.join(OPTIMIZER))
            .context("resuming: reading optimizer state")?;
        let mut records = match io::read_loss_csv(&out.join(LOSS_CSV)) {
            Ok(r) => r,
            Err(shadowfield::Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };
        records.retain(|r| r.epoch < progress.next_epoch);
        info!("resuming at epoch {}", progress.next_epoch);
        (field, progress, records)
    } else {
        let field = settings
            .field
            .build(&ds.manifest.field_bounds, settings.seed)?;
        let progress = TrainProgress::start(&field);
        save_checkpoint(&field, &out.join(CHECKPOINT))?;
        io::write_train_progress(&out.join(OPTIMIZER), &progress)?;
        io::write_loss_csv(&out.join(LOSS_CSV), &[])?;
        (field, progress, Vec::new())
    };

    let epochs = settings.train.epochs;
    let every = |n: usize, epoch: usize| n > 0 && (epoch + 1).is_multiple_of(n);
    let light = ds.training.light.clone();
    let history = fit_from(
        &ds.training,
        &mut field,
        &settings.train,
        &settings.comparison,
        &mut progress,
        &mut |summary, f, p| {
            eprintln!(
                "epoch {:>4}/{epochs}  loss {:.6}  sigma_dt {}  lr {:.3e}",
                summary.epoch + 1,
                summary.mean_loss,
                summary.sigma_dt,
                summary.lr
            );
            records.extend(summary.records.iter().cloned());
            io::write_loss_csv(&out.join(LOSS_CSV), &records)?;
            save_checkpoint(f, &out.join(CHECKPOINT))?;
            io::write_train_progress(&out.join(OPTIMIZER), p)?;
            let last = summary.epoch + 1 == epochs;
            if every(settings.output.checkpoint_every, summary.epoch) || last {
                let path = out
                    .join("checkpoints")
                    .join(format!("epoch_{:04}.json", summary.epoch));
                save_checkpoint(f, &path)?;
            }
            if !validation.is_empty()
                && (every(settings.output.render_every, summary.epoch) || last)
            {
                let dir = out
                    .join("renders")
                    .join(format!("epoch_{:04}", summary.epoch));
                write_validation_renders(&dir, f, &validation, &light, settings)?;
            }
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        field,
        records,
        epoch_loss: history.epoch_loss,
    })
}

/// Sidecar describing an extracted mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshReport {
    pub checkpoint: String,
    pub resolution: usize,
    pub iso: f64,
    pub bounds: Aabb,
    pub vertices: usize,
    pub faces: usize,
}

/// Marching cubes on a checkpoint's raw field; writes `mesh.obj` and
/// `mesh.json` under `out`. An empty mesh is written with a warning.
pub fn mesh(settings: &Settings, checkpoint: &Path, out: &Path) -> Result<TriangleMesh> {
    let field = load_checkpoint(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let cfg = &settings.mesh;
    let bounds = cfg.bounds.unwrap_or(*field.bounds());
    let volume = bake_volume(&field, &bounds, cfg.resolution)?;
    let mesh = marching_cubes(&volume, cfg.iso);
    if mesh.is_empty() {
        warn!(
            "mesh is empty: the field never crosses iso {} inside the bounds",
            cfg.iso
        );
        eprintln!("warning: extracted mesh is empty");
    }
    fs::create_dir_all(out)?;
    io::write_obj(&out.join("mesh.obj"), &mesh)?;
    io::write_json(
        &out.join("mesh.json"),
        &MeshReport {
            checkpoint: checkpoint.display().to_string(),
            resolution: cfg.resolution,
            iso: cfg.iso,
            bounds,
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
        },
    )?;
    eprintln!(
        "wrote mesh with {} faces to {}",
        mesh.faces.len(),
        out.display()
    );
    Ok(mesh)
}

fn points_bounds(points: &[shadowfield::Vec3]) -> Option<Aabb> {
    let first = *points.first()?;
    let (min, max) = points
        .iter()
        .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    Some(Aabb { min, max })
}

fn is_ply(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Crop-normalized ICP RMSE of `mesh_path` against a ground-truth mesh or
/// point cloud; writes `eval.json` under `out`.
pub fn eval(
    settings: &Settings,
    mesh_path: &Path,
    gt_path: &Path,
    dataset: Option<&Path>,
    out: &Path,
) -> Result<EvalReport> {
    let cfg = &settings.eval;
    let predicted =
        io::read_obj(mesh_path).with_context(|| format!("reading {}", mesh_path.display()))?;
    let manifest = dataset
        .map(|d| io::read_json::<DatasetManifest>(&d.join("manifest.json")))
        .transpose()
        .context("reading dataset manifest")?;
    let gt_points = if is_ply(gt_path) {
        Some(io::read_ply_points(gt_path)?)
    } else {
        None
    };
    let gt_mesh = match gt_points {
        Some(_) => None,
        None => {
            Some(io::read_obj(gt_path).with_context(|| format!("reading {}", gt_path.display()))?)
        }
    };
    let crop = match (cfg.crop, &manifest) {
        (Some(bounds), m) => Crop {
            bounds,
            ground: m.as_ref().and_then(|m| m.ground),
            margin: cfg.crop_margin,
        },
        (None, Some(m)) => m
            .eval_crop(cfg.crop_pad, cfg.crop_margin)
            .ok_or_else(|| BadInput("dataset has no object to crop around".into()))?,
        (None, None) => {
            let b = match (&gt_mesh, &gt_points) {
                (Some(m), _) => m.bounds(),
                (None, Some(p)) => points_bounds(p),
                _ => None,
            }
            .ok_or_else(|| BadInput("ground truth is empty".into()))?;
            Crop {
                bounds: Aabb {
                    min: b.min.add_scalar(-cfg.crop_pad),
                    max: b.max.add_scalar(cfg.crop_pad),
                },
                ground: None,
                margin: cfg.crop_margin,
            }
        }
    };
    let es = cfg.settings(settings.seed);
    let icp = match (&gt_mesh, gt_points) {
        (Some(gt), _) => evaluate_meshes(&predicted, gt, &crop, &es)?,
        (None, Some(points)) => {
            let pred = predicted.cropped(&crop);
            if pred.is_empty() {
                bail!(BadInput(
                    "predicted mesh is empty inside the evaluation crop".into()
                ));
            }
            let src = sample_points(&pred, es.points, es.seed)?;
            let dst = PointCloud {
                points: points.into_iter().filter(|p| crop.contains(p)).collect(),
                source: gt_path.display().to_string(),
            };
            icp_rmse(&src, &dst, es.max_iters, es.tol)?
        }
        (None, None) => unreachable!("ground truth is either a mesh or a cloud"),
    };
    let sidecar: Option<MeshReport> = io::read_json(&mesh_path.with_extension("json")).ok();
    let scene = manifest.as_ref().map_or_else(
        || {
            gt_path
                .file_stem()
                .map_or("unknown".into(), |s| s.to_string_lossy().into_owned())
        },
        |m| m.scene.clone(),
    );
    let report = EvalReport {
        scene,
        rmse: icp.rmse,
        rmse_normalization: "ground-truth crop bounding-box diagonal".into(),
        iters: icp.iterations,
        crop_bounds: crop.bounds,
        iso: sidecar.as_ref().map_or(settings.mesh.iso, |s| s.iso),
        resolution: sidecar.as_ref().map(|s| s.resolution),
        points: es.points,
    };
    fs::create_dir_all(out)?;
    io::write_json(&out.join("eval.json"), &report)?;
    eprintln!("rmse {:.6} after {} iterations", report.rmse, report.iters);
    Ok(report)
}

/// Where `render` takes its cameras from.
#[derive(Debug, Clone, Copy)]
pub enum PoseSource<'a> {
    Dataset(&'a Path),
    File(&'a Path),
}

/// Named camera poses and the light, if one is marked.
type Poses = (Vec<(String, Camera)>, Option<Camera>);

fn poses_from(source: PoseSource<'_>) -> Result<Poses> {
    let records: Vec<PoseRecord> = match source {
        PoseSource::Dataset(dir) => {
            let m: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
            let mut r: Vec<PoseRecord> = m
                .views
                .iter()
                .chain(&m.validation)
                .map(|v| v.pose.clone())
                .collect();
            r.push(m.light);
            r
        }
        PoseSource::File(path) => {
            io::read_json(path).with_context(|| format!("reading poses {}", path.display()))?
        }
    };
    let mut cameras = Vec::new();
    let mut light = None;
    for r in records {
        let cam = r.to_camera()?;
        if r.light {
            if light.is_some() {
                bail!(BadInput("pose list marks more than one light".into()));
            }
            light = Some(cam);
        } else {
            cameras.push((r.id, cam));
        }
    }
    Ok((cameras, light))
}

/// Render depth, disparity or shadow images of a checkpoint; writes
/// `<id>_<kind>.pfm` and `<id>_<kind>.png` under `out` and returns the maps.
pub fn render(
    settings: &Settings,
    checkpoint: &Path,
    source: PoseSource<'_>,
    index: Option<usize>,
    kind: RenderKind,
    out: &Path,
) -> Result<Vec<(String, Map2<f64>)>> {
    let field = load_checkpoint(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let (cameras, light) = poses_from(source)?;
    let selected: Vec<&(String, Camera)> = match index {
        Some(i) => vec![cameras.get(i).ok_or_else(|| {
            BadInput(format!(
                "pose index {i} out of range ({} poses)",
                cameras.len()
            ))
        })?],
        None => cameras.iter().collect(),
    };
    if kind == RenderKind::Shadow && light.is_none() {
        bail!(BadInput(
            "shadow renders need a pose marked as the light".into()
        ));
    }
    fs::create_dir_all(out)?;
    let tag = match kind {
        RenderKind::Depth => "depth",
        RenderKind::Disparity => "disparity",
        RenderKind::Shadow => "shadow",
    };
    let mut maps = Vec::with_capacity(selected.len());
    for (id, cam) in selected {
        let map = match kind {
            RenderKind::Depth => render_depth(&field, cam, settings)?,
            RenderKind::Disparity => io::disparity(&render_depth(&field, cam, settings)?),
            RenderKind::Shadow => render_shadow(
                &field,
                cam,
                light.as_ref().expect("checked above"),
                settings,
            )?,
        };
        let stem: PathBuf = out.join(format!("{id}_{tag}"));
        io::write_pfm(&stem.with_extension("pfm"), &map)?;
        match kind {
            RenderKind::Shadow => io::write_mask_png(&stem.with_extension("png"), &map)?,
            _ => io::write_depth_png16(&stem.with_extension("png"), &map)?,
        }
        maps.push((id.clone(), map));
    }
    eprintln!("wrote {} {tag} render(s) to {}", maps.len(), out.display());
    Ok(maps)
}
