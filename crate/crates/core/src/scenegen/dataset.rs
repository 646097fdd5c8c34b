use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{
    builtin_scene, light_camera, normalize_mesh, render_gt_view, sample_hemisphere_poses,
    scene_radius, GtScene, GtShadowMap, MeshScene, RigConfig, SdfScene, BUILTIN_SCENES,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, PoseRecord};
use crate::io;
use crate::recon::Crop;
use crate::supervision::{TrainingSet, TrainingView};

/// Where the ground-truth geometry of a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    Analytic(SdfScene),
    /// Imported mesh, stored as the dataset's ground-truth mesh file.
    Mesh {
        name: String,
        ground: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        platform: Option<Aabb>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub views: usize,
    /// Held-out views rendered alongside the training views.
    pub validation_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub write_depth: bool,
    /// Lattice resolution of the ground-truth mesh of analytic scenes.
    pub gt_mesh_resolution: usize,
    /// Height imported meshes are scaled to.
    pub mesh_height: f64,
    pub rig: RigConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            views: 50,
            validation_views: 4,
            width: 64,
            height: 64,
            seed: 0,
            write_depth: true,
            gt_mesh_resolution: 128,
            mesh_height: 1.0,
            rig: RigConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(invalid("need at least one view"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(self.mesh_height > 0.0) {
            return Err(invalid("mesh height must be positive"));
        }
        self.rig.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub pose: PoseRecord,
    /// Mask path relative to the dataset directory.
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: String,
    pub source: SceneSource,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub rig: RigConfig,
    pub scene_radius: f64,
    pub light: PoseRecord,
    pub views: Vec<ViewEntry>,
    pub validation: Vec<ViewEntry>,
    pub field_bounds: Aabb,
    pub object_bounds: Option<Aabb>,
    pub ground: Option<f64>,
    /// Object surface relative to the dataset directory; absent for scenes
    /// without objects.
    pub gt_mesh: Option<String>,
}

impl DatasetManifest {
    /// Evaluation crop: padded object bounds with the ground removed up to
    /// `margin` above it.
    pub fn eval_crop(&self, pad: f64, margin: f64) -> Option<Crop> {
        let b = self.object_bounds?;
        Some(Crop {
            bounds: Aabb {
                min: b.min.add_scalar(-pad),
                max: b.max.add_scalar(pad),
            },
            ground: self.ground,
            margin,
        })
    }
}

/// Built-in scene by name, or an OBJ file normalized to `mesh_height` and
/// placed on a ground plane at zero.
pub fn resolve_scene(arg: &str, mesh_height: f64) -> Result<(SceneSource, Box<dyn GtScene>)> {
    if let Some(s) = builtin_scene(arg) {
        return Ok((SceneSource::Analytic(s.clone()), Box::new(s)));
    }
    let path = Path::new(arg);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("obj"))
    {
        let mesh = normalize_mesh(&io::read_obj(path)?, mesh_height)?;
        let name = path
            .file_stem()
            .map_or("mesh".into(), |s| s.to_string_lossy().into_owned());
        let scene = MeshScene::new(name.clone(), mesh, Some(0.0))?;
        let source = SceneSource::Mesh {
            name,
            ground: Some(0.0),
            platform: None,
        };
        return Ok((source, Box::new(scene)));
    }
    Err(invalid(format!(
        "unknown scene '{arg}'; expected one of {} or a path to an .obj file",
        BUILTIN_SCENES.join(", ")
    )))
}

fn scene_from_source(
    source: &SceneSource,
    dir: &Path,
    gt_mesh: Option<&str>,
) -> Result<Box<dyn GtScene>> {
    match source {
        SceneSource::Analytic(s) => Ok(Box::new(s.clone())),
        SceneSource::Mesh {
            name,
            ground,
            platform,
        } => {
            let file = gt_mesh.ok_or_else(|| invalid("mesh dataset has no ground-truth mesh"))?;
            let mut scene = MeshScene::new(name.clone(), io::read_obj(&dir.join(file))?, *ground)?;
            scene.platform = *platform;
            Ok(Box::new(scene))
        }
    }
}

/// Render masks (and optionally depths) for `cfg.views` training views and
/// `cfg.validation_views` held-out views into `out`, then write the manifest.
/// The scene's ground is clipped to the rig's platform first.
pub fn generate_dataset(
    source: &SceneSource,
    scene: &dyn GtScene,
    cfg: &GenConfig,
    out: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let rig = &cfg.rig;
    let mut source = source.clone();
    let clipped;
    let scene = match scene.ground() {
        Some(g) => {
            let p = rig.platform(g)?;
            match &mut source {
                SceneSource::Analytic(s) => s.platform = Some(p),
                SceneSource::Mesh { platform, .. } => *platform = Some(p),
            }
            clipped = scene.with_platform(p);
            clipped.as_ref()
        }
        None => scene,
    };
    fs::create_dir_all(out.join("masks"))?;
    if cfg.write_depth {
        fs::create_dir_all(out.join("gt_depth"))?;
    }
    let object_bounds = scene.object_bounds();
    let radius = scene_radius(object_bounds.as_ref(), &rig.target());
    let light = light_camera(rig, radius, rig.light_size)?;
    let gt_light = light.resized(rig.gt_light_size, rig.gt_light_size)?;
    let shadow_map = GtShadowMap::render(scene, &gt_light, rig.gt_bias)?;

    let total = cfg.views + cfg.validation_views;
    let cameras = sample_hemisphere_poses(total, rig, cfg.width, cfg.height, cfg.seed)?;
    let mut views = Vec::with_capacity(cfg.views);
    let mut validation = Vec::with_capacity(cfg.validation_views);
    for (i, cam) in cameras.iter().enumerate() {
        let held_out = i >= cfg.views;
        let id = if held_out {
            format!("val_{:04}", i - cfg.views)
        } else {
            format!("view_{i:04}")
        };
        let gt = render_gt_view(scene, cam, &shadow_map)?;
        let mask = format!("masks/{id}.png");
        io::write_mask_png(&out.join(&mask), &gt.mask)?;
        let depth = if cfg.write_depth {
            let p = format!("gt_depth/{id}.pfm");
            io::write_pfm(&out.join(&p), &gt.zbuffer)?;
            Some(p)
        } else {
            None
        };
        let entry = ViewEntry {
            pose: PoseRecord::from_camera(id, cam, false),
            mask,
            depth,
        };
        if held_out {
            validation.push(entry);
        } else {
            views.push(entry);
        }
    }
    let mesh = scene.object_mesh(cfg.gt_mesh_resolution)?;
    let gt_mesh = if mesh.is_empty() {
        None
    } else {
        io::write_obj(&out.join("gt_mesh.obj"), &mesh)?;
        Some("gt_mesh.obj".to_string())
    };
    let manifest = DatasetManifest {
        scene: scene.name().to_string(),
        source,
        seed: cfg.seed,
        width: cfg.width,
        height: cfg.height,
        rig: rig.clone(),
        scene_radius: radius,
        light: PoseRecord::from_camera("light", &light, true),
        views,
        validation,
        field_bounds: rig.field_bounds,
        object_bounds,
        ground: scene.ground(),
        gt_mesh,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    info!(
        "wrote {} views of '{}' to {}",
        total,
        manifest.scene,
        out.display()
    );
    Ok(manifest)
}

/// A dataset read back from disk.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub training: TrainingSet,
}

impl Dataset {
    pub fn scene(&self) -> Result<Box<dyn GtScene>> {
        scene_from_source(
            &self.manifest.source,
            &self.dir,
            self.manifest.gt_mesh.as_deref(),
        )
    }

    pub fn validation_views(&self) -> Result<Vec<TrainingView>> {
        load_views(&self.dir, &self.manifest.validation)
    }
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: dir.join("manifest.json").display().to_string(),
        reason: reason.into(),
    }
}

pub fn load_views(dir: &Path, entries: &[ViewEntry]) -> Result<Vec<TrainingView>> {
    entries
        .iter()
        .map(|e| {
            let camera = e.pose.to_camera()?;
            let mask = io::read_binary_mask(&dir.join(&e.mask))?;
            Ok(TrainingView {
                id: e.pose.id.clone(),
                camera,
                mask,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    if !manifest.light.light {
        return Err(corrupt(dir, "light pose is not marked as a light"));
    }
    if manifest.views.is_empty() {
        return Err(corrupt(dir, "dataset lists no training views"));
    }
    if manifest
        .views
        .iter()
        .chain(&manifest.validation)
        .any(|v| v.pose.light)
    {
        return Err(corrupt(
            dir,
            "camera pose marked as a light; a dataset has exactly one light",
        ));
    }
    let training = TrainingSet {
        views: load_views(dir, &manifest.views)?,
        light: manifest.light.to_camera()?,
    };
    training.validate()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        training,
    })
}
