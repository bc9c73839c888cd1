//! Synthetic Gaussian-mixture classification tasks.
//!
//! Each class owns `modes_per_class` centers drawn in a `latent_dim`
//! dimensional space. Samples are `basis * center + noise`, where `basis` is
//! an `input_dim x latent_dim` random matrix determined only by
//! `shared_basis_seed`. Tasks that share the seed therefore live in the same
//! low-dimensional subspace, which is what makes learned features
//! transferable between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn default_latent_dim() -> usize {
    8
}

fn default_center_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Complexity knob: mixture components per class.
    pub modes_per_class: usize,
    pub shared_basis_seed: u64,
    pub noise_sigma: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Standard deviation of the latent centers.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_classes == 0
            || self.modes_per_class == 0
            || self.latent_dim == 0
        {
            return Err(Error::InvalidArgument(format!(
                "task `{}`: dimensions, classes and modes must be positive",
                self.task_id
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0)
            || !(self.center_scale.is_finite() && self.center_scale > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "task `{}`: noise_sigma must be >= 0 and center_scale > 0",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// Row-major `num_samples x input_dim` inputs with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        inputs: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || labels.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::ShapeMismatch);
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        Ok(Self {
            input_dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            inputs: rows
                .iter()
                .flat_map(|&r| self.row(r).iter().copied())
                .collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// `x0..x{d-1},label` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.input_dim {
            out.push_str(&format!("x{i},"));
        }
        out.push_str("label\n");
        for r in 0..self.len() {
            for v in self.row(r) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[r]));
        }
        out
    }
}

/// Hashes labelled parts into a 64-bit seed (SHA-256, first 8 bytes LE).
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The `input_dim x latent_dim` basis (row-major), scaled by
/// `1 / sqrt(latent_dim)`. Depends only on `shared_basis_seed` and the two
/// dimensions.
pub fn task_basis(spec: &TaskSpec) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shared_basis_seed);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    (0..spec.input_dim * spec.latent_dim)
        .map(|_| (gaussian(&mut rng) * scale) as f32)
        .collect()
}

/// Latent centers, `num_classes * modes_per_class` rows of `latent_dim`.
fn task_centers(spec: &TaskSpec) -> Vec<f64> {
    let seed = derive_seed(&[
        b"centers",
        &spec.shared_basis_seed.to_le_bytes(),
        spec.task_id.as_bytes(),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.num_classes * spec.modes_per_class * spec.latent_dim)
        .map(|_| gaussian(&mut rng) * spec.center_scale)
        .collect()
}

/// Draws `n` labelled samples. Deterministic in `(spec, n, seed)`.
pub fn generate_task(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be positive".into(),
        ));
    }
    let basis = task_basis(spec);
    let centers = task_centers(spec);
    let latent = spec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        b"samples",
        spec.task_id.as_bytes(),
        &seed.to_le_bytes(),
    ]));
    let mut inputs = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..spec.num_classes);
        let mode = rng.random_range(0..spec.modes_per_class);
        let c = &centers[(label * spec.modes_per_class + mode) * latent..][..latent];
        for row in basis.chunks_exact(latent) {
            let clean: f64 = row.iter().zip(c).map(|(&b, &z)| b as f64 * z).sum();
            let noise = if spec.noise_sigma > 0.0 {
                gaussian(&mut rng) * spec.noise_sigma
            } else {
                0.0
            };
            inputs.push((clean + noise) as f32);
        }
        labels.push(label);
    }
    Dataset::new(spec.input_dim, spec.num_classes, inputs, labels)
}
