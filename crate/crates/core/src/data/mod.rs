//! Training data: synthetic regression tasks, CSV ingestion and
//! partitioning across learners.

mod csv_io;
mod partition;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Matrix};
use crate::rng;

pub use csv_io::{load_csv, write_csv, write_shards, ShardSummary};
pub use partition::{bucket_by_target, partition, PartitionPlan, Scheme, Shard, SKEWED_PRESET};

/// Linear ground truth whose targets are rescaled into a fixed range,
/// standing in for an age-regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub true_weight_seed: u64,
    pub noise_sigma: f64,
    pub target_low: f64,
    pub target_high: f64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be a nonnegative number"));
        }
        if !(self.target_low.is_finite()
            && self.target_high.is_finite()
            && self.target_low < self.target_high)
        {
            return Err(Error::invalid("need finite target_low < target_high"));
        }
        Ok(())
    }

    /// The hidden weight vector `w_true` before rescaling.
    pub fn true_weights(&self) -> Vec<f64> {
        let mut rng = rng::seeded(self.true_weight_seed);
        (0..self.input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Draw `n` rows: standard-normal features, targets from `X·w_true` mapped
/// affinely onto `[target_low, target_high]`, plus `N(0, noise_sigma²)` noise.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let d = spec.input_dim;
    let w = spec.true_weights();
    let mut rng = rng::seeded(seed);
    let features: Vec<f64> = (0..n * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let raw: Vec<f64> = features
        .chunks_exact(d)
        .map(|row| row.iter().zip(&w).map(|(x, w)| x * w).sum())
        .collect();

    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = spec.target_high - spec.target_low;
    let targets = raw
        .iter()
        .map(|&s| {
            let clean = if hi > lo {
                spec.target_low + (s - lo) / (hi - lo) * span
            } else {
                spec.target_low + 0.5 * span
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            clean + spec.noise_sigma * noise
        })
        .collect();
    Dataset::new(Matrix::new(n, d, features)?, targets)
}
