//! Learnable opacity fields `σ = f_θ(x)` with analytic parameter gradients.
//!
//! Fields store a raw (pre-activation) value and apply softplus, so σ ≥ 0
//! everywhere while gradients stay alive in empty space.

mod checkpoint;
mod encoding;
mod grid;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, AnyField, CheckpointHeader};
pub use encoding::{positional_encode, EncodingConfig};
pub use grid::GridField;
pub use mlp::MlpField;

use crate::error::{mismatch, Result};
use crate::Vec3;

/// Raw value of a near-transparent initial field: `softplus⁻¹(0.01)`.
pub fn initial_raw() -> f64 {
    softplus_inv(0.01)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus, i.e. the logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive argument");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// A differentiable opacity field over world space.
pub trait OpacityField: Send + Sync {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Pre-activation value, or `None` outside the field's support.
    fn raw(&self, x: &Vec3) -> Option<f64>;

    /// Activated opacity; exactly zero outside the support.
    fn density(&self, x: &Vec3) -> f64 {
        self.raw(x).map_or(0.0, softplus)
    }

    /// Add `upstream · ∂σ(x)/∂θ` into `grads`.
    fn accumulate_grad(&self, x: &Vec3, upstream: f64, grads: &mut [f64]);
}

/// Per-parameter gradient accumulator aligned with a field's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub data: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn for_field<F: OpacityField + ?Sized>(field: &F) -> Self {
        Self::zeros(field.num_params())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Element-wise add; callers merge worker buffers in a fixed order.
    pub fn merge(&mut self, other: &GradientBuffer) -> Result<()> {
        if other.len() != self.len() {
            return Err(mismatch(self.len(), other.len()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

pub fn query<F: OpacityField + ?Sized>(field: &F, points: &[Vec3]) -> Vec<f64> {
    points.iter().map(|p| field.density(p)).collect()
}

pub fn query_backward<F: OpacityField + ?Sized>(
    field: &F,
    points: &[Vec3],
    upstream: &[f64],
    grads: &mut GradientBuffer,
) -> Result<()> {
    if grads.len() != field.num_params() {
        return Err(mismatch(field.num_params(), grads.len()));
    }
    if upstream.len() != points.len() {
        return Err(mismatch(points.len(), upstream.len()));
    }
    for (p, &g) in points.iter().zip(upstream) {
        if g != 0.0 {
            field.accumulate_grad(p, g, &mut grads.data);
        }
    }
    Ok(())
}
