//! Run settings: built-in defaults, overridden by a JSON config file,
//! overridden by command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shadowfield::field::{softplus_inv, AnyField, EncodingConfig, GridField, MlpField};
use shadowfield::geometry::Aabb;
use shadowfield::recon::EvalSettings;
use shadowfield::scenegen::GenConfig;
use shadowfield::shadow::ComparisonConfig;
use shadowfield::supervision::TrainConfig;
use shadowfield::Vec3;

use crate::BadInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Grid,
    Mlp,
}

/// Representation and initial state of the field to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub kind: FieldKind,
    /// Grid cells along the longest axis of the bounds; the other axes get
    /// the same spacing.
    pub cells: usize,
    /// Explicit grid resolution, overriding `cells`.
    pub resolution: Option<[usize; 3]>,
    /// Initial opacity of every grid node.
    pub init_density: f64,
    pub hidden: Vec<usize>,
    pub encoding: EncodingConfig,
    /// Field support; the dataset's field bounds when absent.
    pub bounds: Option<Aabb>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            kind: FieldKind::Grid,
            cells: 32,
            resolution: None,
            init_density: 0.01,
            hidden: vec![64; 4],
            encoding: EncodingConfig::default(),
            bounds: None,
        }
    }
}

impl FieldConfig {
    pub fn grid_resolution(&self, bounds: &Aabb) -> [usize; 3] {
        if let Some(r) = self.resolution {
            return r;
        }
        let e = bounds.extent();
        let spacing = e.max() / self.cells as f64;
        [0, 1, 2].map(|a| ((e[a] / spacing).round() as usize).max(2))
    }

    pub fn build(&self, default_bounds: &Aabb, seed: u64) -> Result<AnyField> {
        let bounds = self.bounds.unwrap_or(*default_bounds);
        Ok(match self.kind {
            FieldKind::Grid => {
                if !(self.init_density > 0.0) {
                    return Err(BadInput(format!(
                        "init_density must be positive, got {}",
                        self.init_density
                    ))
                    .into());
                }
                let raw = softplus_inv(self.init_density);
                AnyField::Grid(GridField::filled(
                    self.grid_resolution(&bounds),
                    bounds,
                    raw,
                )?)
            }
            FieldKind::Mlp => {
                AnyField::Mlp(MlpField::new(&self.hidden, self.encoding, bounds, seed)?)
            }
        })
    }
}

/// Training outputs besides the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Write a numbered checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Render the validation views every this many epochs; 0 disables.
    pub render_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 50,
            render_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    /// Lattice nodes per axis.
    pub resolution: usize,
    /// Contour value on the raw field.
    pub iso: f64,
    /// Extraction bounds; the field bounds when absent.
    pub bounds: Option<Aabb>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            iso: 0.0,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub points: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Padding added around the object bounds for the crop.
    pub crop_pad: f64,
    /// Height above the ground below which points are dropped.
    pub crop_margin: f64,
    /// Explicit crop box, overriding the dataset's object bounds.
    pub crop: Option<Aabb>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self {
            points: s.points,
            max_iters: s.max_iters,
            tol: s.tol,
            crop_pad: 0.05,
            crop_margin: 0.05,
            crop: None,
        }
    }
}

impl EvalConfig {
    pub fn settings(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            points: self.points,
            seed,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { samples: 128 }
    }
}

/// Every setting of every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Settings {
    pub seed: u64,
    pub gen: GenConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub comparison: ComparisonConfig,
    pub output: OutputConfig,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
}

/// Flags shared by the subcommands; `None` leaves the setting alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub size: Option<(usize, usize)>,
    pub views: Option<usize>,
    pub epochs: Option<usize>,
    pub iso: Option<f64>,
    pub res: Option<usize>,
    pub bounds: Option<Aabb>,
}

impl Settings {
    /// Defaults, then the config file if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let settings: Self = serde_json::from_str(&text)
            .map_err(|e| BadInput(format!("config {}: {e}", path.display())))?;
        Ok(settings)
    }

    /// Apply command-line flags on top of the file settings. `--seed`
    /// drives every random stream; `--res` sets both the training grid and
    /// the mesh lattice; `--bounds` sets the field, mesh and crop boxes.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        if let Some((w, h)) = o.size {
            self.gen.width = w;
            self.gen.height = h;
        }
        if let Some(v) = o.views {
            self.gen.views = v;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(iso) = o.iso {
            self.mesh.iso = iso;
        }
        if let Some(r) = o.res {
            self.mesh.resolution = r;
            self.field.cells = r;
            self.field.resolution = None;
        }
        if let Some(b) = o.bounds {
            self.field.bounds = Some(b);
            self.mesh.bounds = Some(b);
            self.eval.crop = Some(b);
        }
    }
}

/// `WxH`, e.g. `64x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| BadInput(format!("size must look like WxH, got '{s}'")))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => bail!(BadInput(format!(
            "size must be two positive integers, got '{s}'"
        ))),
    }
}

/// `x0,y0,z0,x1,y1,z1`.
pub fn parse_bounds(s: &str) -> Result<Aabb> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| BadInput(format!("bounds must be six numbers, got '{s}'")))?;
    if v.len() != 6 {
        bail!(BadInput(format!(
            "bounds must be six numbers, got {}",
            v.len()
        )));
    }
    Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
        .map_err(|e| BadInput(format!("bounds: {e}")).into())
}
