//! Shape from binary shadow masks.
//!
//! A volumetric opacity field is rendered into expected ray-termination
//! distances from a camera and from a light, the camera pixels are projected
//! into the light's shadow map, and a soft depth comparison predicts which
//! pixels are shadowed. Everything on that path has a hand-written adjoint,
//! so the field can be fitted to ground-truth masks with Adam.
//!
//! Around the differentiable core live a synthetic dataset generator
//! ([`scenegen`]), mesh extraction and ICP evaluation ([`recon`]), and file
//! formats ([`io`]).

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod map;
pub mod recon;
pub mod renderer;
pub mod scenegen;
pub mod shadow;
pub mod supervision;

pub use error::{Error, Result};
pub use map::Map2;

/// World-space vector type used throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
