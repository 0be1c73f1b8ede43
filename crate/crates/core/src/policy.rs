//! Local-work allocation per federation round.
//!
//! Synchronous training gives every learner `E` full local epochs.
//! Semi-synchronous training fixes a wall-time budget
//! `t_max = λ · max_k ceil(|D_k| / β_k) · t_β_k` and lets each learner run as
//! many batches as fit in it: `B_k = max(1, floor(t_max / t_β_k))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the scheduler knows about a learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerProfile {
    pub learner_index: u16,
    pub num_examples: usize,
    pub batch_size: usize,
    /// Seconds per local batch.
    pub batch_time: f64,
}

impl LearnerProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "learner {}: example count and batch size must be positive",
                self.learner_index
            )));
        }
        if !(self.batch_time.is_finite() && self.batch_time > 0.0) {
            return Err(Error::invalid(format!(
                "learner {}: batch time {} is not positive",
                self.learner_index, self.batch_time
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.num_examples.div_ceil(self.batch_size) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Sync {
        local_epochs: u32,
    },
    #[serde(rename = "semisync")]
    SemiSync {
        lambda: f64,
    },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Sync { local_epochs: 0 } => {
                Err(Error::invalid("local_epochs must be at least 1"))
            }
            Policy::SemiSync { lambda } if !(lambda.is_finite() && lambda > 0.0) => {
                Err(Error::invalid(format!("lambda {lambda} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Sync { .. } => "sync",
            Policy::SemiSync { .. } => "semisync",
        }
    }

    pub fn plan(&self, profiles: &[LearnerProfile]) -> Result<SchedulePlan> {
        match *self {
            Policy::Sync { local_epochs } => sync_allocations(profiles, local_epochs),
            Policy::SemiSync { lambda } => semisync_allocations(profiles, lambda),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub learner_index: u16,
    pub num_batches: u64,
}

/// Per-round local work, in the same order as the profiles it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    /// Round time budget in seconds; semi-synchronous plans only.
    pub t_max: Option<f64>,
    pub allocations: Vec<Allocation>,
}

impl SchedulePlan {
    pub fn batches_for(&self, learner_index: u16) -> Option<u64> {
        self.allocations
            .iter()
            .find(|a| a.learner_index == learner_index)
            .map(|a| a.num_batches)
    }
}

/// Seconds for one full pass over the learner's data.
pub fn epoch_time(profile: &LearnerProfile) -> f64 {
    profile.batches_per_epoch() as f64 * profile.batch_time
}

fn check(profiles: &[LearnerProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::invalid("no learner profiles"));
    }
    profiles.iter().try_for_each(LearnerProfile::validate)
}

pub fn compute_tmax(profiles: &[LearnerProfile], lambda: f64) -> Result<f64> {
    check(profiles)?;
    Policy::SemiSync { lambda }.validate()?;
    let slowest = profiles.iter().map(epoch_time).fold(0.0, f64::max);
    Ok(lambda * slowest)
}

/// `floor(x)` that tolerates `x` landing a few ulps under an integer.
fn floor_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

pub fn semisync_allocations(profiles: &[LearnerProfile], lambda: f64) -> Result<SchedulePlan> {
    let t_max = compute_tmax(profiles, lambda)?;
    let allocations = profiles
        .iter()
        .map(|p| Allocation {
            learner_index: p.learner_index,
            num_batches: (floor_tolerant(t_max / p.batch_time) as u64).max(1),
        })
        .collect();
    Ok(SchedulePlan {
        t_max: Some(t_max),
        allocations,
    })
}

pub fn sync_allocations(profiles: &[LearnerProfile], local_epochs: u32) -> Result<SchedulePlan> {
    check(profiles)?;
    Policy::Sync { local_epochs }.validate()?;
    let allocations = profiles
        .iter()
        .map(|p| Allocation {
            learner_index: p.learner_index,
            num_batches: u64::from(local_epochs) * p.batches_per_epoch(),
        })
        .collect();
    Ok(SchedulePlan {
        t_max: None,
        allocations,
    })
}

/// Seconds each learner spends computing under `plan`.
pub fn busy_time(profiles: &[LearnerProfile], plan: &SchedulePlan) -> Result<Vec<f64>> {
    profiles
        .iter()
        .map(|p| {
            plan.batches_for(p.learner_index)
                .map(|b| b as f64 * p.batch_time)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "plan has no allocation for learner {}",
                        p.learner_index
                    ))
                })
        })
        .collect()
}

/// Seconds each learner waits at the barrier for the slowest one.
pub fn idle_time(profiles: &[LearnerProfile], plan: &SchedulePlan) -> Result<Vec<f64>> {
    let busy = busy_time(profiles, plan)?;
    let longest = busy.iter().copied().fold(0.0, f64::max);
    Ok(busy.iter().map(|b| longest - b).collect())
}

/// Per-learner batch time for the next plan. Frozen at the calibrated value
/// unless re-estimation is on, in which case it follows an exponential
/// moving average with weight 0.5 on the latest observation.
pub fn next_batch_time(current: f64, observed: f64, reestimate: bool) -> f64 {
    if reestimate && observed.is_finite() && observed > 0.0 {
        0.5 * current + 0.5 * observed
    } else {
        current
    }
}
