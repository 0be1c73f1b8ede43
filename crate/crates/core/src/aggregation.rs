//! Weighted federated averaging.
//!
//! The community model is `Σ_k (p_k / Σ_j p_j) · w_k`, where `p_k` is a
//! learner's contribution value (its number of training examples).

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::policy::LearnerProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionWeights {
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl ContributionWeights {
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }
}

pub fn normalize_weights(p: &[f64]) -> Result<ContributionWeights> {
    if p.is_empty() {
        return Err(Error::invalid("no contribution weights"));
    }
    if let Some(bad) = p.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!(
            "contribution weight {bad} is not positive"
        )));
    }
    let total: f64 = p.iter().sum();
    Ok(ContributionWeights {
        raw: p.to_vec(),
        normalized: p.iter().map(|w| w / total).collect(),
    })
}

/// Contribution values `p_k = |D_k|`.
pub fn weights_from_examples(profiles: &[LearnerProfile]) -> Result<ContributionWeights> {
    if let Some(p) = profiles.iter().find(|p| p.num_examples == 0) {
        return Err(Error::invalid(format!(
            "learner {} has no training examples",
            p.learner_index
        )));
    }
    let raw: Vec<f64> = profiles.iter().map(|p| p.num_examples as f64).collect();
    normalize_weights(&raw)
}

/// Convex combination of `models` with the given raw weights.
///
/// Models are combined in slice order, which callers keep sorted by
/// learner index so the result is bitwise reproducible. Each coordinate is
/// computed as `w_0 + Σ_k n_k (w_k - w_0)`, which equals the weighted mean
/// because the normalized weights sum to one, and returns `w_0` unchanged
/// when every model agrees. The result is clamped into the coordinate-wise
/// hull of the inputs to absorb rounding.
pub fn weighted_average(models: &[(&ParameterVector, f64)]) -> Result<ParameterVector> {
    let Some(&(anchor, _)) = models.first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    let raw: Vec<f64> = models.iter().map(|(_, w)| *w).collect();
    let weights = normalize_weights(&raw)?;
    for (k, (m, _)) in models.iter().enumerate() {
        if !m.same_layout(anchor) {
            return Err(Error::invalid(format!(
                "model {k} has a different parameter layout"
            )));
        }
        if !m.is_finite() {
            return Err(Error::invalid(format!(
                "model {k} has non-finite parameters"
            )));
        }
    }

    let mut out = anchor.clone();
    for (i, slot) in out.values_mut().iter_mut().enumerate() {
        let base = *slot;
        let (mut lo, mut hi) = (base, base);
        let mut delta = 0.0;
        for ((m, _), n) in models.iter().zip(weights.normalized()) {
            let v = m.values()[i];
            lo = lo.min(v);
            hi = hi.max(v);
            delta += n * (v - base);
        }
        if delta != 0.0 {
            *slot = (base + delta).clamp(lo, hi);
        }
    }
    Ok(out)
}
