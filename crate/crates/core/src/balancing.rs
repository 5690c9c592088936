//! Adaptive modality balancing: inverse-size sampling, per-modality learning
//! rates and per-modality loss weights.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    /// `|D_m|`, measured once when the corpus is registered.
    pub sizes: BTreeMap<String, u64>,
    pub beta: f64,
    pub eta0: f64,
}

impl ModalityStats {
    pub fn new(sizes: BTreeMap<String, u64>, beta: f64, eta0: f64) -> Result<Self> {
        let s = ModalityStats { sizes, beta, eta0 };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::InvalidArgument("no modalities registered".into()));
        }
        if let Some((m, _)) = self.sizes.iter().find(|(_, &n)| n == 0) {
            return Err(Error::InvalidArgument(format!("modality '{m}' has an empty corpus")));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.eta0.is_finite() && self.eta0 > 0.0) {
            return Err(Error::InvalidArgument(format!("eta0 must be positive, got {}", self.eta0)));
        }
        Ok(())
    }
}

/// `p_m = |D_m|^-β / Σ_k |D_k|^-β`, evaluated in log space.
pub fn sampling_probs(stats: &ModalityStats) -> Result<BTreeMap<String, f64>> {
    stats.validate()?;
    let logits: Vec<f64> = stats
        .sizes
        .values()
        .map(|&n| -stats.beta * (n as f64).ln())
        .collect();
    Ok(softmax_map(stats.sizes.keys(), &logits))
}

/// Probabilities proportional to corpus size (no balancing).
pub fn natural_probs(stats: &ModalityStats) -> Result<BTreeMap<String, f64>> {
    stats.validate()?;
    let logits: Vec<f64> = stats.sizes.values().map(|&n| (n as f64).ln()).collect();
    Ok(softmax_map(stats.sizes.keys(), &logits))
}

fn softmax_map<'a>(keys: impl Iterator<Item = &'a String>, logits: &[f64]) -> BTreeMap<String, f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    keys.cloned().zip(exps.into_iter().map(|e| e / z)).collect()
}

/// `η_m = η₀ / sqrt(|D_m|)`.
pub fn scaled_lr(stats: &ModalityStats) -> Result<BTreeMap<String, f64>> {
    stats.validate()?;
    Ok(stats
        .sizes
        .iter()
        .map(|(m, &n)| (m.clone(), stats.eta0 / (n as f64).sqrt()))
        .collect())
}

/// `w_m = 1 / sqrt(|D_m|)`.
pub fn loss_weight(stats: &ModalityStats) -> Result<BTreeMap<String, f64>> {
    stats.validate()?;
    Ok(stats
        .sizes
        .iter()
        .map(|(m, &n)| (m.clone(), 1.0 / (n as f64).sqrt()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub probs: BTreeMap<String, f64>,
    pub lrs: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl BalancePlan {
    /// With `amb` the balanced plan; without it, size-proportional sampling,
    /// `η₀` everywhere and unit weights.
    pub fn new(stats: &ModalityStats, amb: bool) -> Result<Self> {
        if amb {
            Ok(BalancePlan {
                probs: sampling_probs(stats)?,
                lrs: scaled_lr(stats)?,
                weights: loss_weight(stats)?,
            })
        } else {
            let ones = |v: f64| stats.sizes.keys().map(|m| (m.clone(), v)).collect();
            Ok(BalancePlan {
                probs: natural_probs(stats)?,
                lrs: ones(stats.eta0),
                weights: ones(1.0),
            })
        }
    }

    pub fn modalities(&self) -> impl Iterator<Item = &str> {
        self.probs.keys().map(String::as_str)
    }
}

/// One categorical draw from `plan.probs`.
pub fn draw_modality<'p, R: Rng + ?Sized>(plan: &'p BalancePlan, rng: &mut R) -> &'p str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = "";
    for (m, p) in &plan.probs {
        acc += p;
        last = m;
        if u < acc {
            return m;
        }
    }
    last
}
