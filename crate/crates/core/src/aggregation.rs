//! Aggregation policies over parameter sets.
//!
//! All functions are pure. Accumulation happens in `f64` in a canonical
//! input order and is rounded to `f32` once per scalar, so results do not
//! depend on the order in which contributions arrived.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerParams, ParameterSet};
use crate::registry::{Contribution, VersionId};

/// One aggregation input: parameters plus their sample count.
///
/// `key` fixes the accumulation order (the contribution id when the input
/// comes from the registry).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParams {
    pub key: String,
    pub params: ParameterSet,
    pub weight: u64,
}

impl WeightedParams {
    pub fn new(key: impl Into<String>, params: ParameterSet, weight: u64) -> Self {
        Self {
            key: key.into(),
            params,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalenessPolicy {
    #[default]
    LatestOnly,
    RebranchOld,
}

fn cmp_bits(a: &ParameterSet, b: &ParameterSet) -> Ordering {
    let bits = |p: &ParameterSet| {
        p.layers
            .iter()
            .flat_map(|l| l.scalars().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    bits(a).cmp(&bits(b))
}

/// Canonical order: key, then weight, then parameter bit patterns. Total on
/// the content, so any permutation of the inputs yields the same order.
fn canonical_order(inputs: &[&WeightedParams]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (inputs[i], inputs[j]);
        a.key
            .cmp(&b.key)
            .then(a.weight.cmp(&b.weight))
            .then_with(|| cmp_bits(&a.params, &b.params))
    });
    order
}

fn weighted_mean(
    inputs: &[&WeightedParams],
    layers: std::ops::Range<usize>,
) -> Result<ParameterSet> {
    let first = inputs.first().ok_or(Error::EmptyAggregation)?;
    if first.params.layers.len() < layers.end {
        return Err(Error::ShapeMismatch);
    }
    for input in inputs {
        if input.weight == 0 {
            return Err(Error::InvalidArgument(format!(
                "input `{}` has zero weight",
                input.key
            )));
        }
        if input.params.layers.len() != first.params.layers.len()
            || !input.params.layers[layers.clone()]
                .iter()
                .zip(&first.params.layers[layers.clone()])
                .all(|(a, b)| a.same_shape(b) && a.is_consistent())
        {
            return Err(Error::ShapeMismatch);
        }
        if !input.params.layers[layers.clone()]
            .iter()
            .all(|l| l.scalars().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "input `{}` has non-finite parameters",
                input.key
            )));
        }
    }

    let order = canonical_order(inputs);
    let total: u128 = inputs.iter().map(|i| i.weight as u128).sum();
    let total = total as f64;
    let ratios: Vec<f64> = order
        .iter()
        .map(|&k| inputs[k].weight as f64 / total)
        .collect();

    let out = layers
        .map(|li| {
            let template = &first.params.layers[li];
            let mut weights = vec![0f64; template.weights.len()];
            let mut bias = vec![0f64; template.bias.len()];
            for (&k, &ratio) in order.iter().zip(&ratios) {
                let layer = &inputs[k].params.layers[li];
                for (acc, v) in weights.iter_mut().zip(&layer.weights) {
                    *acc += ratio * *v as f64;
                }
                for (acc, v) in bias.iter_mut().zip(&layer.bias) {
                    *acc += ratio * *v as f64;
                }
            }
            LayerParams::new(
                template.rows,
                template.cols,
                weights.into_iter().map(|v| v as f32).collect(),
                bias.into_iter().map(|v| v as f32).collect(),
            )
        })
        .collect();
    Ok(ParameterSet::new(out))
}

/// Sample-weighted federated average:
/// `out[i] = sum_k (n_k / sum_j n_j) * x_k[i]`.
pub fn fedavg(inputs: &[WeightedParams]) -> Result<ParameterSet> {
    let refs: Vec<&WeightedParams> = inputs.iter().collect();
    let layer_count = refs
        .first()
        .ok_or(Error::EmptyAggregation)?
        .params
        .layers
        .len();
    weighted_mean(&refs, 0..layer_count)
}

/// Multi-task merge: feature layers (`< boundary`) are averaged over every
/// shared input, and each task's head (`>= boundary`) only over that task's
/// inputs.
///
/// Inputs are full parameter sets; the relevant layer range is sliced out.
pub fn fmtl_merge(
    shared_inputs: &[WeightedParams],
    per_task_heads: &BTreeMap<String, Vec<WeightedParams>>,
    boundary: usize,
) -> Result<(ParameterSet, BTreeMap<String, ParameterSet>)> {
    let shared = if boundary == 0 {
        ParameterSet::default()
    } else {
        let refs: Vec<&WeightedParams> = shared_inputs.iter().collect();
        weighted_mean(&refs, 0..boundary)?
    };
    let heads = per_task_heads
        .iter()
        .map(|(task, inputs)| {
            let refs: Vec<&WeightedParams> = inputs.iter().collect();
            let layer_count = refs
                .first()
                .ok_or(Error::EmptyAggregation)?
                .params
                .layers
                .len();
            if layer_count <= boundary {
                return Err(Error::ShapeMismatch);
            }
            let head = weighted_mean(&refs, boundary..layer_count)?;
            Ok((task.clone(), head))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((shared, heads))
}

/// What to do with contributions that were not trained from the head.
#[derive(Debug, Clone, PartialEq)]
pub enum StaleAction {
    /// Mark them ignored.
    Ignore(Vec<Contribution>),
    /// Branch from each stale base and merge the group there.
    Rebranch(BTreeMap<VersionId, Vec<Contribution>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StalenessSplit {
    pub fresh: Vec<Contribution>,
    pub stale: StaleAction,
}

impl StalenessSplit {
    pub fn stale(&self) -> Vec<&Contribution> {
        match &self.stale {
            StaleAction::Ignore(list) => list.iter().collect(),
            StaleAction::Rebranch(groups) => groups.values().flatten().collect(),
        }
    }
}

/// Fresh = based on `head` exactly; everything else is stale.
pub fn filter_stale(
    contributions: &[Contribution],
    head: VersionId,
    policy: StalenessPolicy,
) -> StalenessSplit {
    let (fresh, stale): (Vec<_>, Vec<_>) = contributions
        .iter()
        .cloned()
        .partition(|c| c.base_version == head);
    let stale = match policy {
        StalenessPolicy::LatestOnly => StaleAction::Ignore(stale),
        StalenessPolicy::RebranchOld => {
            let mut groups: BTreeMap<VersionId, Vec<Contribution>> = BTreeMap::new();
            for c in stale {
                groups.entry(c.base_version).or_default().push(c);
            }
            StaleAction::Rebranch(groups)
        }
    };
    StalenessSplit { fresh, stale }
}
