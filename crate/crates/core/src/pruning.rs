//! Unstructured pruning: GraSP importance scores, global top-κ selection,
//! mask application, and the magnitude criterion used by the iterative
//! baseline.
//!
//! Scores follow the keep-highest convention: `s = −W ⊙ Hg`, and the mask keeps
//! the `⌈κ·n⌉` largest entries of `s` ranked across all layers at once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_kappa, kept_count, top_k_bits, Mask};
use crate::nn::ModelSpec;
use crate::nn::{hessian_vector_product, ModelState, NetworkLoss, Objective};
use crate::tensor::Tensor;

/// Per-weight importance, congruent with the prunable layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    values: Vec<f64>,
}

impl ImportanceScore {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("importance score at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// GraSP scores `−w ⊙ (H g)` for an arbitrary objective, restricted to the
/// entries listed in `prunable`.
pub fn grasp_scores_for<O: Objective>(
    obj: &O,
    w: &[f64],
    prunable: &[usize],
) -> Result<ImportanceScore> {
    let g = obj.gradient(w)?;
    // Hg = ∇(gᵀ·stop_grad(g)) = H·g with g held constant.
    let hg = hessian_vector_product(obj, w, &g)?;
    if let Some(i) = hg.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "Hessian-gradient product at parameter {i}"
        )));
    }
    ImportanceScore::new(prunable.iter().map(|&i| -w[i] * hg[i]).collect())
}

/// GraSP importance of every prunable weight of the network on one batch.
pub fn grasp_score(
    spec: &ModelSpec,
    state: &ModelState,
    batch_x: &Tensor,
    batch_y: &[usize],
) -> Result<ImportanceScore> {
    state.check_spec(spec)?;
    let obj = NetworkLoss {
        spec,
        batch_x,
        batch_y,
    };
    grasp_scores_for(&obj, &state.params, &state.prunable_indices())
}

/// Keeps exactly `⌈κ·n⌉` entries with the highest scores (global ranking,
/// ties to the lower index).
pub fn top_kappa_mask(scores: &ImportanceScore, kappa: f64) -> Result<Mask> {
    check_kappa(kappa)?;
    let k = kept_count(kappa, scores.len());
    Ok(Mask::from_bits(top_k_bits(scores.values(), k)))
}

/// Zeroes every pruned weight; biases and kept weights are untouched.
pub fn apply_mask(state: &ModelState, mask: &Mask) -> Result<ModelState> {
    let keep = state.expand_mask(mask)?;
    let mut out = state.clone();
    for (p, k) in out.params.iter_mut().zip(keep) {
        if !k {
            *p = 0.0;
        }
    }
    Ok(out)
}

/// Top-κ mask by absolute weight value.
pub fn magnitude_mask(state: &ModelState, kappa: f64) -> Result<Mask> {
    let scores: Vec<f64> = state.prunable_values().iter().map(|w| w.abs()).collect();
    top_kappa_mask(&ImportanceScore::new(scores)?, kappa)
}

/// Kept fraction after `round` pruning iterations: geometric interpolation
/// from 1 to `target_kappa` over `total_prune_rounds`, constant afterwards.
pub fn iterative_prune_schedule(
    round: usize,
    target_kappa: f64,
    total_prune_rounds: usize,
) -> Result<f64> {
    check_kappa(target_kappa)?;
    if total_prune_rounds == 0 || round >= total_prune_rounds {
        return Ok(target_kappa);
    }
    Ok(target_kappa.powf(round as f64 / total_prune_rounds as f64))
}
