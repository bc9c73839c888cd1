//! Dense network models: architecture, parameters, compile info.

mod encoding;

pub use encoding::{
    decode_parameters, deserialize_model, encode_parameters, serialize_model, ArchitectureWire,
    LayerParamsWire, LayerWire, ModelDocument,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// A chain of dense layers split into a feature part and a prediction head.
///
/// Layers with index `>= prediction_boundary` form the head. The split is
/// stored rather than inferred so that feature-only forks and multi-task
/// merges are unambiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelArchitecture {
    layers: Vec<LayerSpec>,
    prediction_boundary: usize,
    input_dim: usize,
}

impl ModelArchitecture {
    pub fn new(
        input_dim: usize,
        layers: Vec<LayerSpec>,
        prediction_boundary: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("architecture has no layers".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidModel("input_dim must be positive".into()));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(Error::InvalidModel(format!(
                    "layer {i} has a zero dimension"
                )));
            }
            if layer.input_dim != width {
                return Err(Error::InvalidModel(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    layer.input_dim
                )));
            }
            if layer.activation == Activation::Softmax && i + 1 != layers.len() {
                return Err(Error::InvalidModel(format!(
                    "softmax on layer {i} which is not the final layer"
                )));
            }
            width = layer.output_dim;
        }
        if prediction_boundary >= layers.len() {
            return Err(Error::InvalidModel(format!(
                "prediction_boundary {prediction_boundary} out of range for {} layers",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            prediction_boundary,
            input_dim,
        })
    }

    /// Relu hidden layers followed by a softmax classifier layer, which is
    /// also the whole prediction head.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::new(width, h, Activation::Relu));
            width = h;
        }
        layers.push(LayerSpec::new(width, num_classes, Activation::Softmax));
        let boundary = layers.len() - 1;
        Self::new(input_dim, layers, boundary)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn prediction_boundary(&self) -> usize {
        self.prediction_boundary
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width of the final layer.
    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    /// The same architecture with the final layer widened or narrowed to
    /// `classes` outputs.
    pub fn with_num_classes(&self, classes: usize) -> Result<Self> {
        let mut layers = self.layers.clone();
        let last = layers.len() - 1;
        layers[last].output_dim = classes;
        Self::new(self.input_dim, layers, self.prediction_boundary)
    }
}

/// Weights (`rows x cols` = `output_dim x input_dim`, row-major) and bias of
/// one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerParams {
    pub fn new(rows: usize, cols: usize, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        Self {
            rows,
            cols,
            weights,
            bias,
        }
    }

    pub fn zeros(spec: &LayerSpec) -> Self {
        Self::new(
            spec.output_dim,
            spec.input_dim,
            vec![0.0; spec.input_dim * spec.output_dim],
            vec![0.0; spec.output_dim],
        )
    }

    /// Declared dimensions agree with the buffer lengths.
    pub fn is_consistent(&self) -> bool {
        self.weights.len() == self.rows * self.cols && self.bias.len() == self.rows
    }

    pub fn same_shape(&self, other: &LayerParams) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.weights.len() == other.weights.len()
            && self.bias.len() == other.bias.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights then bias.
    pub fn scalars(&self) -> impl Iterator<Item = &f32> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn scalars_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

impl ParameterSet {
    pub fn new(layers: Vec<LayerParams>) -> Self {
        Self { layers }
    }

    pub fn zeros(arch: &ModelArchitecture) -> Self {
        Self::new(arch.layers().iter().map(LayerParams::zeros).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.scalars().all(|v| v.is_finite()))
    }

    /// Same layer count and per-layer lengths.
    pub fn same_shape(&self, other: &ParameterSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Content blob: every layer's weights then bias as little-endian f32,
    /// layers in order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for layer in &self.layers {
            for v in layer.scalars() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`ParameterSet::to_blob`] for the given architecture.
    pub fn from_blob(arch: &ModelArchitecture, blob: &[u8]) -> Result<Self> {
        let expected: usize = arch
            .layers()
            .iter()
            .map(|l| l.output_dim * (l.input_dim + 1))
            .sum();
        if blob.len() != expected * 4 {
            return Err(Error::ShapeMismatch);
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let layers = arch
            .layers()
            .iter()
            .map(|spec| {
                let weights = floats
                    .by_ref()
                    .take(spec.input_dim * spec.output_dim)
                    .collect();
                let bias = floats.by_ref().take(spec.output_dim).collect();
                LayerParams::new(spec.output_dim, spec.input_dim, weights, bias)
            })
            .collect();
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompileInfo {
    pub learning_rate: f64,
    pub loss: Loss,
    pub optimizer: Optimizer,
}

impl CompileInfo {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        let info = Self {
            learning_rate,
            loss: Loss::CrossEntropy,
            optimizer: Optimizer::Sgd,
        };
        info.validate()?;
        Ok(info)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidModel(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// True iff `params` has exactly one correctly shaped (weights, bias) pair
/// per layer of `arch`.
pub fn shape_check(arch: &ModelArchitecture, params: &ParameterSet) -> bool {
    params.layers.len() == arch.layers().len()
        && arch.layers().iter().zip(&params.layers).all(|(spec, p)| {
            p.rows == spec.output_dim && p.cols == spec.input_dim && p.is_consistent()
        })
}

/// Glorot-uniform weights and zero biases, a pure function of `(arch, seed)`.
///
/// The generator is ChaCha8 (`rand_chacha`) seeded with
/// `seed_from_u64(seed)`. Weights are drawn layer by layer in row-major
/// order, each as `(2u - 1) * L` with `u` a uniform `f64` in `[0, 1)` and
/// `L = sqrt(6 / (fan_in + fan_out))`, then rounded to `f32` (towards zero
/// when rounding would leave `[-L, L]`).
pub fn init_parameters(arch: &ModelArchitecture, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layers()
        .iter()
        .map(|spec| {
            let limit = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
            let weights = (0..spec.input_dim * spec.output_dim)
                .map(|_| {
                    let u: f64 = rng.random();
                    glorot_round((2.0 * u - 1.0) * limit, limit)
                })
                .collect();
            LayerParams::new(
                spec.output_dim,
                spec.input_dim,
                weights,
                vec![0.0; spec.output_dim],
            )
        })
        .collect();
    ParameterSet { layers }
}

fn glorot_round(value: f64, limit: f64) -> f32 {
    let v = value as f32;
    if (v as f64).abs() > limit {
        // one ulp towards zero
        f32::from_bits(v.to_bits() - 1)
    } else {
        v
    }
}
