use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::Aabb;
use crate::Vec3;

use super::{positional_encode, sigmoid, softplus, EncodingConfig, OpacityField};

/// Small perceptron on positionally encoded points: ReLU hidden layers, a
/// scalar linear output and softplus activation.
///
/// World points are mapped into `[-1, 1]³` through `bounds` before encoding;
/// outside the bounds the opacity is zero, like [`super::GridField`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    hidden: Vec<usize>,
    encoding: EncodingConfig,
    bounds: Aabb,
    params: Vec<f64>,
}

/// Flat-parameter offsets for one dense layer.
#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
}

impl MlpField {
    /// Randomly initialized perceptron with weights and biases drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new(
        hidden: &[usize],
        encoding: EncodingConfig,
        bounds: Aabb,
        seed: u64,
    ) -> Result<Self> {
        let mut field = Self::zeroed(hidden, encoding, bounds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in field.layers() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            let n = layer.inputs * layer.outputs + layer.outputs;
            for p in &mut field.params[layer.weights..layer.weights + n] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(field)
    }

    pub fn zeroed(hidden: &[usize], encoding: EncodingConfig, bounds: Aabb) -> Result<Self> {
        if encoding.num_frequencies == 0 {
            return Err(invalid("encoding needs at least one frequency"));
        }
        if hidden.contains(&0) {
            return Err(invalid("hidden layers must have nonzero width"));
        }
        let mut field = Self {
            hidden: hidden.to_vec(),
            encoding,
            bounds,
            params: Vec::new(),
        };
        let total = field
            .layers()
            .iter()
            .map(|l| l.inputs * l.outputs + l.outputs)
            .sum();
        field.params = vec![0.0; total];
        Ok(field)
    }

    pub fn with_params(
        hidden: &[usize],
        encoding: EncodingConfig,
        bounds: Aabb,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut f = Self::zeroed(hidden, encoding, bounds)?;
        if params.len() != f.params.len() {
            return Err(mismatch(f.params.len(), params.len()));
        }
        f.params = params;
        Ok(f)
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn encoding(&self) -> EncodingConfig {
        self.encoding
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    fn layers(&self) -> Vec<Layer> {
        let mut sizes = vec![self.encoding.output_dim()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    fn normalize(&self, x: &Vec3) -> Option<Vec3> {
        if !self.bounds.contains(x) {
            return None;
        }
        let e = self.bounds.extent();
        Some(Vec3::new(
            2.0 * (x.x - self.bounds.min.x) / e.x - 1.0,
            2.0 * (x.y - self.bounds.min.y) / e.y - 1.0,
            2.0 * (x.z - self.bounds.min.z) / e.z - 1.0,
        ))
    }

    /// Forward pass keeping every layer's activations (post-ReLU for hidden
    /// layers, the raw output last).
    fn forward(&self, input: Vec<f64>, layers: &[Layer]) -> Vec<Vec<f64>> {
        let mut acts = vec![input];
        for (li, layer) in layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let w = &self.params[layer.weights..layer.biases];
            let b = &self.params[layer.biases..layer.biases + layer.outputs];
            let last = li + 1 == layers.len();
            let out: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    let z = b[o] + row.iter().zip(prev).map(|(a, x)| a * x).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }
}

impl OpacityField for MlpField {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn raw(&self, x: &Vec3) -> Option<f64> {
        let p = self.normalize(x)?;
        let layers = self.layers();
        let acts = self.forward(positional_encode(&p, &self.encoding), &layers);
        Some(acts.last().unwrap()[0])
    }

    fn density(&self, x: &Vec3) -> f64 {
        self.raw(x).map_or(0.0, softplus)
    }

    fn accumulate_grad(&self, x: &Vec3, upstream: f64, grads: &mut [f64]) {
        let Some(p) = self.normalize(x) else { return };
        let layers = self.layers();
        let acts = self.forward(positional_encode(&p, &self.encoding), &layers);
        let raw = acts.last().unwrap()[0];
        let mut delta = vec![upstream * sigmoid(raw)];
        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grads[layer.biases + o] += d;
                let row = layer.weights + o * layer.inputs;
                for (i, &a) in input.iter().enumerate() {
                    grads[row + i] += d * a;
                }
            }
            if li == 0 {
                break;
            }
            // Back through the previous layer's ReLU; the encoding is fixed.
            let w = &self.params[layer.weights..layer.biases];
            delta = (0..layer.inputs)
                .map(|i| {
                    if input[i] <= 0.0 {
                        return 0.0;
                    }
                    (0..layer.outputs)
                        .map(|o| w[o * layer.inputs + i] * delta[o])
                        .sum()
                })
                .collect();
        }
    }
}
