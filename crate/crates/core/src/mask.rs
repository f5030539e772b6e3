use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary keep/prune flags over the prunable (weight) entries of a model, in
/// layout order. Biases are never covered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Realized fraction of kept entries.
    pub fn kept_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Positions that differ between two masks of equal length.
    pub fn hamming(&self, other: &Mask) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LayoutMismatch(format!(
                "masks of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }
}

pub fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa > 0.0 && kappa <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidKappa(kappa))
    }
}

/// `⌈κ·n⌉`, guarded against floating-point products that land a hair above an
/// integer (e.g. `0.3 * 10`).
pub fn kept_count(kappa: f64, n: usize) -> usize {
    let raw = kappa * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}

/// Keeps the `k` largest scores; ties go to the lower index.
pub(crate) fn top_k_bits(scores: &[f64], k: usize) -> Vec<bool> {
    let n = scores.len();
    let mut bits = vec![false; n];
    if k == 0 {
        return bits;
    }
    if k >= n {
        return vec![true; n];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then_with(|| a.cmp(b));
    idx.select_nth_unstable_by(k - 1, order);
    for &i in &idx[..k] {
        bits[i] = true;
    }
    bits
}
