//! Dense-network training from scratch: forward pass, backpropagated
//! cross-entropy gradients, mini-batch SGD, evaluation.
//!
//! The math is generic over the float type so gradients can be checked in
//! `f64` while training runs in `f32` like the wire format.

mod data;

pub use data::{derive_seed, generate_task, task_basis, Dataset, TaskSpec};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    shape_check, Activation, CompileInfo, LayerParams, ModelArchitecture, ParameterSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    pub train_loss: f64,
}

impl TrainMetrics {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "train_accuracy {} outside [0, 1]",
                self.train_accuracy
            )));
        }
        if !(self.train_loss.is_finite() && self.train_loss >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "train_loss {} must be finite and non-negative",
                self.train_loss
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Parameters in a working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Float> Network<T> {
    pub fn from_params(params: &ParameterSet) -> Self {
        let cast = |v: &[f32]| v.iter().map(|&x| T::from(x).expect("f32 fits")).collect();
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: cast(&l.weights),
                    bias: cast(&l.bias),
                })
                .collect(),
        }
    }

    /// Rounds to `f32`.
    pub fn to_params(&self) -> ParameterSet {
        let cast = |v: &[T]| v.iter().map(|x| x.to_f32().expect("finite")).collect();
        ParameterSet::new(
            self.layers
                .iter()
                .map(|l| LayerParams::new(l.rows, l.cols, cast(&l.weights), cast(&l.bias)))
                .collect(),
        )
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    rows: l.rows,
                    cols: l.cols,
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    fn matches(&self, arch: &ModelArchitecture) -> bool {
        self.layers.len() == arch.layers().len()
            && arch.layers().iter().zip(&self.layers).all(|(s, l)| {
                l.rows == s.output_dim
                    && l.cols == s.input_dim
                    && l.weights.len() == l.rows * l.cols
                    && l.bias.len() == l.rows
            })
    }
}

/// Per-layer values for a batch of `n` rows, each buffer row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass<T> {
    pub rows: usize,
    pub pre_activations: Vec<Vec<T>>,
    pub activations: Vec<Vec<T>>,
    /// Row-wise softmax of the logits (the final activations when the last
    /// layer is softmax).
    pub probabilities: Vec<T>,
    /// Final pre-activations when the last layer is softmax, otherwise the
    /// final activations.
    pub logits: Vec<T>,
}

fn softmax_row<T: Float>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `-ln softmax(logits)[label]`, computed as `(max - z_label) + ln(sum)`,
/// which is never negative.
fn cross_entropy<T: Float>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = logits
        .iter()
        .fold(T::zero(), |acc, &z| acc + (z - max).exp());
    (max - logits[label]) + sum.ln()
}

pub fn forward<T: Float>(
    arch: &ModelArchitecture,
    net: &Network<T>,
    inputs: &[T],
) -> Result<ForwardPass<T>> {
    if !net.matches(arch) || !inputs.len().is_multiple_of(arch.input_dim()) {
        return Err(Error::ShapeMismatch);
    }
    let rows = inputs.len() / arch.input_dim();
    let mut pre_activations = Vec::with_capacity(net.layers.len());
    let mut activations: Vec<Vec<T>> = Vec::with_capacity(net.layers.len());
    for (spec, layer) in arch.layers().iter().zip(&net.layers) {
        let input = activations.last().map_or(inputs, Vec::as_slice);
        let mut z = vec![T::zero(); rows * layer.rows];
        for r in 0..rows {
            let x = &input[r * layer.cols..(r + 1) * layer.cols];
            for o in 0..layer.rows {
                let w = &layer.weights[o * layer.cols..(o + 1) * layer.cols];
                z[r * layer.rows + o] = w
                    .iter()
                    .zip(x)
                    .fold(layer.bias[o], |acc, (&wi, &xi)| acc + wi * xi);
            }
        }
        let a = match spec.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => z.iter().map(|&v| v.max(T::zero())).collect(),
            Activation::Softmax => {
                let mut a = vec![T::zero(); z.len()];
                for r in 0..rows {
                    let span = r * layer.rows..(r + 1) * layer.rows;
                    softmax_row(&z[span.clone()], &mut a[span]);
                }
                a
            }
        };
        pre_activations.push(z);
        activations.push(a);
    }
    let last = arch.layers().len() - 1;
    let classes = arch.num_classes();
    let (logits, probabilities) = if arch.layers()[last].activation == Activation::Softmax {
        (pre_activations[last].clone(), activations[last].clone())
    } else {
        let logits = activations[last].clone();
        let mut probs = vec![T::zero(); logits.len()];
        for r in 0..rows {
            let span = r * classes..(r + 1) * classes;
            softmax_row(&logits[span.clone()], &mut probs[span]);
        }
        (logits, probs)
    };
    Ok(ForwardPass {
        rows,
        pre_activations,
        activations,
        probabilities,
        logits,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows || labels.iter().any(|&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "expected {rows} labels in [0, {classes})"
        )));
    }
    Ok(())
}

/// Gradients of the mean cross-entropy over the batch, and that mean.
pub fn backward<T: Float>(
    arch: &ModelArchitecture,
    net: &Network<T>,
    inputs: &[T],
    labels: &[usize],
) -> Result<(Network<T>, T)> {
    let pass = forward(arch, net, inputs)?;
    let rows = pass.rows;
    let classes = arch.num_classes();
    check_labels(labels, rows, classes)?;
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = T::one() / T::from(rows).expect("row count fits");

    let mut loss = T::zero();
    let mut delta = pass.probabilities.clone();
    for (r, &label) in labels.iter().enumerate() {
        loss = loss + cross_entropy(&pass.logits[r * classes..(r + 1) * classes], label);
        delta[r * classes + label] = delta[r * classes + label] - T::one();
    }
    for d in delta.iter_mut() {
        *d = *d * scale;
    }

    let mut grads = net.zeros_like();
    let last = arch.layers().len() - 1;
    // delta holds dL/d(logits); turn it into dL/dz for the last layer
    if arch.layers()[last].activation == Activation::Relu {
        for (d, &z) in delta.iter_mut().zip(&pass.pre_activations[last]) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
    }
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        let input = if l == 0 {
            inputs
        } else {
            &pass.activations[l - 1]
        };
        let g = &mut grads.layers[l];
        for r in 0..rows {
            let x = &input[r * layer.cols..(r + 1) * layer.cols];
            for o in 0..layer.rows {
                let d = delta[r * layer.rows + o];
                if d == T::zero() {
                    continue;
                }
                g.bias[o] = g.bias[o] + d;
                let gw = &mut g.weights[o * layer.cols..(o + 1) * layer.cols];
                for (gwi, &xi) in gw.iter_mut().zip(x) {
                    *gwi = *gwi + d * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![T::zero(); rows * layer.cols];
        for r in 0..rows {
            for o in 0..layer.rows {
                let d = delta[r * layer.rows + o];
                if d == T::zero() {
                    continue;
                }
                let w = &layer.weights[o * layer.cols..(o + 1) * layer.cols];
                let p = &mut prev[r * layer.cols..(r + 1) * layer.cols];
                for (pi, &wi) in p.iter_mut().zip(w) {
                    *pi = *pi + d * wi;
                }
            }
        }
        if arch.layers()[l - 1].activation == Activation::Relu {
            for (p, &z) in prev.iter_mut().zip(&pass.pre_activations[l - 1]) {
                if z <= T::zero() {
                    *p = T::zero();
                }
            }
        }
        delta = prev;
    }
    Ok((grads, loss * scale))
}

fn sgd_step<T: Float>(net: &mut Network<T>, grads: &Network<T>, lr: T) {
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, &gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w = *w - lr * gw;
        }
        for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b = *b - lr * gb;
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    arch: &ModelArchitecture,
    params: &ParameterSet,
    dataset: &Dataset,
) -> Result<Evaluation> {
    if !shape_check(arch, params) || dataset.input_dim != arch.input_dim() {
        return Err(Error::ShapeMismatch);
    }
    let classes = arch.num_classes();
    check_labels(&dataset.labels, dataset.len(), classes)?;
    let net = Network::<f32>::from_params(params);
    let pass = forward(arch, &net, &dataset.inputs)?;
    let mut correct = 0usize;
    let mut loss = 0f64;
    for (r, &label) in dataset.labels.iter().enumerate() {
        let span = r * classes..(r + 1) * classes;
        if argmax(&pass.probabilities[span.clone()]) == label {
            correct += 1;
        }
        loss += cross_entropy(&pass.logits[span], label) as f64;
    }
    let n = dataset.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// `epochs` passes of mini-batch SGD over `dataset` in a seeded shuffle
/// order, then the metrics of the final parameters on the same data.
pub fn train_local(
    arch: &ModelArchitecture,
    params: &ParameterSet,
    dataset: &Dataset,
    compile: &CompileInfo,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParameterSet, TrainMetrics)> {
    if !shape_check(arch, params) || dataset.input_dim != arch.input_dim() {
        return Err(Error::ShapeMismatch);
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch_size must be positive".into(),
        ));
    }
    // zero is accepted here and leaves the parameters untouched
    if !(compile.learning_rate.is_finite() && compile.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument(
            "learning_rate must be non-negative".into(),
        ));
    }
    check_labels(&dataset.labels, dataset.len(), arch.num_classes())?;
    let lr = compile.learning_rate as f32;
    let dim = dataset.input_dim;
    let mut net = Network::<f32>::from_params(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch_inputs = Vec::with_capacity(batch_size * dim);
    let mut batch_labels = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batch_inputs.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_inputs.extend_from_slice(&dataset.inputs[i * dim..(i + 1) * dim]);
                batch_labels.push(dataset.labels[i]);
            }
            let (grads, _) = backward(arch, &net, &batch_inputs, &batch_labels)?;
            sgd_step(&mut net, &grads, lr);
        }
    }
    let trained = net.to_params();
    let eval = evaluate(arch, &trained, dataset)?;
    Ok((
        trained,
        TrainMetrics {
            train_accuracy: eval.accuracy,
            train_loss: eval.loss,
        },
    ))
}
