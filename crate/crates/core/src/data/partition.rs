use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Equal shard sizes, every shard drawn from the whole target distribution.
    UniformIid,
    /// Equal shard sizes, each shard a narrow band of targets.
    UniformNoniid,
    /// Shard sizes follow `size_fractions`, filled in target order.
    SkewedNoniid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub num_learners: usize,
    /// Target buckets per learner for the non-IID schemes.
    #[serde(default = "one")]
    pub buckets_per_learner: usize,
    /// One fraction per learner, used by `skewed_noniid` only.
    #[serde(default)]
    pub size_fractions: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl PartitionPlan {
    pub fn new(scheme: Scheme, num_learners: usize, seed: u64) -> Self {
        PartitionPlan {
            scheme,
            num_learners,
            buckets_per_learner: 1,
            size_fractions: Vec::new(),
            seed,
        }
    }

    pub fn skewed(size_fractions: Vec<f64>, seed: u64) -> Self {
        PartitionPlan {
            scheme: Scheme::SkewedNoniid,
            num_learners: size_fractions.len(),
            buckets_per_learner: 1,
            size_fractions,
            seed,
        }
    }

    /// Eight label-skewed shards: one learner holds ~28.7% of the rows and
    /// the rest taper off.
    pub fn skewed_preset(seed: u64) -> Self {
        PartitionPlan::skewed(SKEWED_PRESET.to_vec(), seed)
    }

    pub fn num_buckets(&self) -> usize {
        self.num_learners * self.buckets_per_learner
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.num_learners == 0 {
            return Err(Error::invalid("num_learners must be positive"));
        }
        if self.num_learners > n {
            return Err(Error::invalid(format!(
                "{} learners for {n} rows",
                self.num_learners
            )));
        }
        if self.num_learners > usize::from(u16::MAX) {
            return Err(Error::invalid("too many learners for the wire format"));
        }
        if self.buckets_per_learner == 0 {
            return Err(Error::invalid("buckets_per_learner must be positive"));
        }
        if self.scheme == Scheme::SkewedNoniid {
            let f = &self.size_fractions;
            if f.len() != self.num_learners {
                return Err(Error::invalid(format!(
                    "{} size fractions for {} learners",
                    f.len(),
                    self.num_learners
                )));
            }
            if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::invalid("size fractions must be positive"));
            }
            let sum: f64 = f.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "size fractions sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Shard sizes under the skewed quota rule: `round(fraction_k · n)`,
    /// with the rounding residual absorbed by the largest shard.
    pub fn skewed_sizes(&self, n: usize) -> Result<Vec<usize>> {
        self.validate(n)?;
        let mut sizes: Vec<i64> = self
            .size_fractions
            .iter()
            .map(|f| (f * n as f64).round() as i64)
            .collect();
        let largest = self
            .size_fractions
            .iter()
            .enumerate()
            .fold(0, |best, (i, f)| {
                if *f > self.size_fractions[best] {
                    i
                } else {
                    best
                }
            });
        let residual = n as i64 - sizes.iter().sum::<i64>();
        sizes[largest] += residual;
        if let Some(k) = sizes.iter().position(|s| *s < 1) {
            return Err(Error::invalid(format!(
                "size fraction {} leaves learner {k} without rows",
                self.size_fractions[k]
            )));
        }
        Ok(sizes.into_iter().map(|s| s as usize).collect())
    }
}

pub const SKEWED_PRESET: [f64; 8] = [0.287, 0.2, 0.15, 0.11, 0.09, 0.07, 0.05, 0.043];

/// One learner's slice of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub learner_index: u16,
    /// Row indices into the partitioned dataset.
    pub rows: Vec<usize>,
    pub data: Dataset,
}

/// Row indices sorted by target (ties by index) and cut into `num_buckets`
/// contiguous groups whose sizes differ by at most one, larger groups first.
pub fn bucket_by_target(data: &Dataset, num_buckets: usize) -> Result<Vec<Vec<usize>>> {
    let n = data.len();
    if num_buckets == 0 || num_buckets > n {
        return Err(Error::invalid(format!(
            "cannot cut {n} rows into {num_buckets} buckets"
        )));
    }
    let order = sorted_by_target(data);
    let sizes = even_sizes(n, num_buckets);
    Ok(cut(&order, &sizes))
}

fn sorted_by_target(data: &Dataset) -> Vec<usize> {
    let t = data.targets();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));
    order
}

fn even_sizes(n: usize, parts: usize) -> Vec<usize> {
    let (q, r) = (n / parts, n % parts);
    (0..parts).map(|i| q + usize::from(i < r)).collect()
}

fn cut(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let group = order[start..start + s].to_vec();
            start += s;
            group
        })
        .collect()
}

pub fn partition(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Shard>> {
    let n = data.len();
    plan.validate(n)?;
    let learners = plan.num_learners;
    let groups: Vec<Vec<usize>> = match plan.scheme {
        Scheme::UniformIid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::seeded(plan.seed));
            let mut groups = vec![Vec::with_capacity(n / learners + 1); learners];
            for (i, row) in order.into_iter().enumerate() {
                groups[i % learners].push(row);
            }
            groups
        }
        Scheme::UniformNoniid => {
            let buckets = bucket_by_target(data, plan.num_buckets())?;
            buckets
                .chunks(plan.buckets_per_learner)
                .map(|chunk| chunk.concat())
                .collect()
        }
        Scheme::SkewedNoniid => {
            let sizes = plan.skewed_sizes(n)?;
            cut(&sorted_by_target(data), &sizes)
        }
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(k, mut rows)| {
            // Keep input order within a shard; a lone learner then sees the
            // dataset exactly as given.
            rows.sort_unstable();
            Ok(Shard {
                learner_index: k as u16,
                data: data.select(&rows)?,
                rows,
            })
        })
        .collect()
}
