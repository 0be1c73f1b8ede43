//! Learner runtime: runs the assigned number of SGD batches on a private
//! shard and reports the resulting model.

use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clock::{self, Clock};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, ParameterVector, Trainer};
use crate::rng::{self, hash_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be a nonnegative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    /// Batch size actually used on a shard of `n` rows.
    pub fn effective_batch_size(&self, n: usize) -> usize {
        self.batch_size.min(n).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAssignment {
    pub round: u32,
    pub community: ParameterVector,
    pub num_batches: u64,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub learner_index: u16,
    pub round: u32,
    pub params: ParameterVector,
    pub num_examples: usize,
    /// Median seconds per batch.
    pub batch_time: f64,
    /// Total seconds spent on the assigned batches.
    pub busy_time: f64,
    pub batches_executed: u64,
}

/// Result of a run of local SGD.
pub(crate) struct LocalRun {
    pub params: ParameterVector,
    pub batch_times: Vec<Duration>,
}

/// `num_batches` SGD steps starting from `start`.
///
/// Rows are visited in a permutation drawn from `seed` at every epoch
/// boundary; once an epoch is exhausted a freshly shuffled one begins. The
/// last batch of an epoch may be short.
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_sgd(
    spec: &ModelSpec,
    start: &ParameterVector,
    data: &Dataset,
    lr: f64,
    batch_size: usize,
    num_batches: u64,
    seed: u64,
    clock: &Clock,
) -> Result<LocalRun> {
    let start = start.clone().conform_to(&spec.layout())?;
    let mut trainer = Trainer::new(spec, data, lr)?;
    let mut params = start.into_values();
    let n = data.len();
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut cursor = n;
    let mut batch_times = Vec::with_capacity(num_batches as usize);

    for b in 0..num_batches {
        if cursor >= n {
            order.clear();
            order.extend(0..n);
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(n);
        let rows = &order[cursor..end];
        let ((), took) = clock.time(|| trainer.step(&mut params, rows));
        cursor = end;
        batch_times.push(took);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameters left the finite range at batch {b}"
            )));
        }
    }
    Ok(LocalRun {
        params: ParameterVector::new(spec.layout(), params)?,
        batch_times,
    })
}

/// A learner bound to its shard and clock.
#[derive(Debug, Clone)]
pub struct Learner {
    pub index: u16,
    pub spec: ModelSpec,
    pub shard: Dataset,
    pub clock: Clock,
}

impl Learner {
    pub fn new(index: u16, spec: ModelSpec, shard: Dataset, clock: Clock) -> Result<Self> {
        spec.validate()?;
        if shard.dim() != spec.input_dim {
            return Err(Error::invalid(format!(
                "learner {index}: shard has {} features, model expects {}",
                shard.dim(),
                spec.input_dim
            )));
        }
        Ok(Learner {
            index,
            spec,
            shard,
            clock,
        })
    }

    pub fn execute(&self, task: &TaskAssignment) -> Result<LocalUpdate> {
        execute_task(&self.spec, task, self.index, &self.shard, &self.clock)
    }
}

pub fn execute_task(
    spec: &ModelSpec,
    task: &TaskAssignment,
    learner_index: u16,
    shard: &Dataset,
    clock: &Clock,
) -> Result<LocalUpdate> {
    task.hyperparams.validate()?;
    if task.num_batches == 0 {
        return Err(Error::invalid("assignment must carry at least one batch"));
    }
    let n = shard.len();
    let batch_size = task.hyperparams.effective_batch_size(n);
    if batch_size < task.hyperparams.batch_size {
        log::warn!(
            "learner {learner_index}: batch size {} exceeds shard size {n}, clamped",
            task.hyperparams.batch_size
        );
    }
    let seed = hash_seed(task.hyperparams.seed, task.round, learner_index);
    let run = local_sgd(
        spec,
        &task.community,
        shard,
        task.hyperparams.learning_rate,
        batch_size,
        task.num_batches,
        seed,
        clock,
    )
    .map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!(
            "learner {learner_index}, round {}: {msg}",
            task.round
        )),
        other => other,
    })?;
    let busy: Duration = run.batch_times.iter().sum();
    Ok(LocalUpdate {
        learner_index,
        round: task.round,
        params: run.params,
        num_examples: n,
        batch_time: clock::median(&run.batch_times).as_secs_f64(),
        busy_time: busy.as_secs_f64(),
        batches_executed: run.batch_times.len() as u64,
    })
}
