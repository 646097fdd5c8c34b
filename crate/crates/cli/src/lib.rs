//! Command-line driver: dataset generation, training, mesh extraction,
//! evaluation and rendering.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{parse_bounds, parse_size, Overrides, Settings};

/// Exit status for malformed flags, configs, files or arguments.
pub const EXIT_BAD_INPUT: i32 = 2;
/// Exit status for a numerical failure such as a NaN loss.
pub const EXIT_NUMERICAL: i32 = 3;

/// Bad input detected by the driver itself.
#[derive(Debug)]
pub struct BadInput(pub String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

/// Process exit status for an error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use shadowfield::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<BadInput>().is_some() {
            return EXIT_BAD_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numerical(_) => EXIT_NUMERICAL,
                E::Io(io) if io.kind() != std::io::ErrorKind::NotFound => 1,
                _ => EXIT_BAD_INPUT,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_BAD_INPUT;
            }
        }
    }
    1
}

#[derive(Debug, Parser)]
#[command(
    name = "shadowfield",
    version,
    about = "Shape from binary shadow masks"
)]
pub struct Cli {
    /// JSON settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results are reproducible for a fixed count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shadow dataset.
    Gen(GenArgs),
    /// Fit an opacity field to a dataset.
    Train(TrainArgs),
    /// Extract a mesh from a checkpoint.
    Mesh(MeshArgs),
    /// Compare a mesh with a ground-truth mesh or point cloud.
    Eval(EvalArgs),
    /// Render depth, disparity or shadow images from a checkpoint.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Built-in scene name or path to an .obj file.
    pub scene: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub views: Option<usize>,
    /// Image size as WxH.
    #[arg(long)]
    pub size: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Grid cells along the longest axis.
    #[arg(long)]
    pub res: Option<usize>,
    /// Field bounds as x0,y0,z0,x1,y1,z1.
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: Option<String>,
    /// Continue from the checkpoint and optimizer state in the output
    /// directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Checkpoint header (.json).
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lattice nodes per axis.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub iso: Option<f64>,
    /// Extraction bounds as x0,y0,z0,x1,y1,z1.
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mesh (.obj).
    pub mesh: PathBuf,
    /// Ground truth: mesh (.obj) or point cloud (.ply).
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset whose object bounds and ground define the crop.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Crop box as x0,y0,z0,x1,y1,z1.
    #[arg(long, allow_hyphen_values = true)]
    pub bounds: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderKind {
    Depth,
    Disparity,
    Shadow,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint header (.json).
    pub checkpoint: PathBuf,
    /// Dataset providing the camera poses and the light.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON list of poses; shadows need one marked as the light.
    #[arg(long, conflicts_with = "dataset")]
    pub poses: Option<PathBuf>,
    /// Render only this pose; all poses when absent. Dataset indices run
    /// over the training views, then the validation views.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long, value_enum, default_value_t = RenderKind::Depth)]
    pub kind: RenderKind,
    #[arg(long)]
    pub out: PathBuf,
}

impl Cli {
    /// Layered settings for this invocation.
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        let mut o = Overrides {
            seed: self.seed,
            ..Default::default()
        };
        match &self.command {
            Command::Gen(a) => {
                o.views = a.views;
                o.size = a.size.as_deref().map(parse_size).transpose()?;
            }
            Command::Train(a) => {
                o.epochs = a.epochs;
                o.res = a.res;
                o.bounds = a.bounds.as_deref().map(parse_bounds).transpose()?;
            }
            Command::Mesh(a) => {
                o.res = a.res;
                o.iso = a.iso;
                o.bounds = a.bounds.as_deref().map(parse_bounds).transpose()?;
            }
            Command::Eval(a) => {
                o.bounds = a.bounds.as_deref().map(parse_bounds).transpose()?;
            }
            Command::Render(_) => {}
        }
        s.apply(&o);
        Ok(s)
    }
}

/// Run one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(BadInput("--threads must be positive".into()).into());
        }
        // Fails only if the pool already exists, as in tests that call
        // `run` repeatedly; the first configuration then stays in force.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let settings = cli.settings()?;
    match &cli.command {
        Command::Gen(a) => commands::gen(&settings, &a.scene, &a.out).map(|_| ()),
        Command::Train(a) => commands::train(&settings, &a.dataset, &a.out, a.resume).map(|_| ()),
        Command::Mesh(a) => commands::mesh(&settings, &a.checkpoint, &a.out).map(|_| ()),
        Command::Eval(a) => commands::eval(
            &settings,
            &a.mesh,
            &a.ground_truth,
            a.dataset.as_deref(),
            &a.out,
        )
        .map(|_| ()),
        Command::Render(a) => {
            let source = match (&a.dataset, &a.poses) {
                (Some(d), None) => commands::PoseSource::Dataset(d),
                (None, Some(p)) => commands::PoseSource::File(p),
                _ => {
                    return Err(
                        BadInput("render needs exactly one of --dataset or --poses".into()).into(),
                    )
                }
            };
            commands::render(&settings, &a.checkpoint, source, a.index, a.kind, &a.out).map(|_| ())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_reach_the_settings() {
        let cli = Cli::parse_from([
            "shadowfield",
            "--seed",
            "4",
            "gen",
            "cuboid",
            "--out",
            "x",
            "--views",
            "3",
            "--size",
            "8x6",
        ]);
        let s = cli.settings().unwrap();
        assert_eq!(
            (s.gen.seed, s.gen.views, s.gen.width, s.gen.height),
            (4, 3, 8, 6)
        );
        let cli = Cli::parse_from([
            "shadowfield",
            "train",
            "d",
            "--out",
            "o",
            "--epochs",
            "2",
            "--res",
            "16",
        ]);
        let s = cli.settings().unwrap();
        assert_eq!((s.train.epochs, s.field.cells), (2, 16));
        let cli = Cli::parse_from([
            "shadowfield",
            "mesh",
            "c.json",
            "--out",
            "o",
            "--res",
            "64",
            "--iso",
            "0.5",
        ]);
        let s = cli.settings().unwrap();
        assert_eq!((s.mesh.resolution, s.mesh.iso), (64, 0.5));
        let cli = Cli::parse_from([
            "shadowfield",
            "eval",
            "m.obj",
            "g.obj",
            "--out",
            "o",
            "--bounds",
            "-1,-1,-1,1,1,1",
        ]);
        assert_eq!(cli.settings().unwrap().eval.crop.unwrap().min.x, -1.0);
    }

    #[test]
    fn bad_size_is_bad_input() {
        let cli = Cli::parse_from([
            "shadowfield",
            "gen",
            "cuboid",
            "--out",
            "x",
            "--size",
            "8by6",
        ]);
        let err = cli.settings().unwrap_err();
        assert_eq!(exit_code(&err), EXIT_BAD_INPUT);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let num: anyhow::Error = shadowfield::Error::Numerical("nan".into()).into();
        assert_eq!(exit_code(&num), EXIT_NUMERICAL);
        let bad: anyhow::Error = shadowfield::Error::InvalidInput("x".into()).into();
        assert_eq!(exit_code(&bad.context("while loading")), EXIT_BAD_INPUT);
        let missing: anyhow::Error = std::io::Error::from(std::io::ErrorKind::NotFound).into();
        assert_eq!(exit_code(&missing), EXIT_BAD_INPUT);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
