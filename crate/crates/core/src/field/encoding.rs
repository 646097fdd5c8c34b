use serde::{Deserialize, Serialize};

use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 10,
            include_input: false,
        }
    }
}

impl EncodingConfig {
    pub fn output_dim(&self) -> usize {
        6 * self.num_frequencies + if self.include_input { 3 } else { 0 }
    }
}

/// `γ(x)`: for each coordinate and each frequency `k < L`, the pair
/// `sin(2ᵏπx), cos(2ᵏπx)`, optionally preceded by `x` itself.
///
/// Layout: `[x?, (sin k=0, cos k=0, sin k=1, ...) for x, then y, then z]`.
pub fn positional_encode(x: &Vec3, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim());
    if cfg.include_input {
        out.extend_from_slice(&[x.x, x.y, x.z]);
    }
    for c in 0..3 {
        let mut freq = std::f64::consts::PI;
        for _ in 0..cfg.num_frequencies {
            let (s, co) = (freq * x[c]).sin_cos();
            out.push(s);
            out.push(co);
            freq *= 2.0;
        }
    }
    out
}
