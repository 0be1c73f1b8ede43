//! Federation controller state machine.
//!
//! ```text
//! AwaitingRegistration --N registrations--> Calibrating --N timings--> Ready
//! Ready --start_round--> RoundOpen --N updates--> Aggregating --complete_round--> Ready
//! Ready --finish--> Finished        (a rejected update in RoundOpen also ends in Finished)
//! ```
//!
//! The state machine does no I/O; [`crate::federation`] drives it from
//! transport sessions.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::aggregation::{weighted_average, ContributionWeights};
use crate::error::{Error, Result};
use crate::learner::{Hyperparams, LocalUpdate, TaskAssignment};
use crate::model::{evaluate, Dataset, Metrics, ModelSpec, ParameterVector};
use crate::policy::{next_batch_time, LearnerProfile, Policy, SchedulePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingRegistration,
    Calibrating,
    /// Between rounds: calibration or the previous aggregation is complete.
    Ready,
    RoundOpen,
    Aggregating,
    Finished,
}

/// What a learner announces when it joins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Registration {
    pub learner_index: u16,
    pub num_examples: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Incomplete { received: usize, expected: usize },
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub plan: SchedulePlan,
    pub updates_received: usize,
    /// Seconds this round took, simulated or wall-clock.
    pub round_time: f64,
    pub metrics: Metrics,
    /// Community model produced by this round's aggregation.
    pub community: ParameterVector,
    pub messages_sent: u64,
    pub messages_received: u64,
    /// Reported busy seconds per learner, by learner index.
    pub busy_times: Vec<f64>,
}

impl RoundRecord {
    /// Barrier wait per learner: slowest busy time minus own busy time.
    pub fn idle_times(&self) -> Vec<f64> {
        let longest = self.busy_times.iter().copied().fold(0.0, f64::max);
        self.busy_times.iter().map(|b| longest - b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FederationState {
    spec: ModelSpec,
    policy: Policy,
    hyperparams: Hyperparams,
    reestimate: bool,
    expected: usize,
    phase: Phase,
    round: u32,
    registry: BTreeMap<u16, Registration>,
    calibration: BTreeMap<u16, f64>,
    profiles: BTreeMap<u16, LearnerProfile>,
    community: ParameterVector,
    plan: Option<SchedulePlan>,
    pending: BTreeMap<u16, LocalUpdate>,
    messages_sent: u64,
    messages_received: u64,
}

impl FederationState {
    pub fn new(
        spec: ModelSpec,
        initial: ParameterVector,
        policy: Policy,
        hyperparams: Hyperparams,
        expected_learners: usize,
    ) -> Result<Self> {
        spec.validate()?;
        policy.validate()?;
        hyperparams.validate()?;
        if expected_learners == 0 || expected_learners > usize::from(u16::MAX) {
            return Err(Error::invalid(format!(
                "expected learner count {expected_learners} out of range"
            )));
        }
        if initial.layout() != spec.layout().as_slice() {
            return Err(Error::invalid(
                "initial model does not match the model spec",
            ));
        }
        Ok(FederationState {
            spec,
            policy,
            hyperparams,
            reestimate: false,
            expected: expected_learners,
            phase: Phase::AwaitingRegistration,
            round: 0,
            registry: BTreeMap::new(),
            calibration: BTreeMap::new(),
            profiles: BTreeMap::new(),
            community: initial,
            plan: None,
            pending: BTreeMap::new(),
            messages_sent: 0,
            messages_received: 0,
        })
    }

    /// Re-estimate batch times after every round instead of freezing the
    /// calibrated values.
    pub fn with_reestimation(mut self, on: bool) -> Self {
        self.reestimate = on;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn community(&self) -> &ParameterVector {
        &self.community
    }

    pub fn expected_learners(&self) -> usize {
        self.expected
    }

    pub fn registered(&self) -> usize {
        self.registry.len()
    }

    /// Calibrated profiles in learner-index order; empty before calibration.
    pub fn profiles(&self) -> Vec<LearnerProfile> {
        self.profiles.values().copied().collect()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    fn require(&self, op: &'static str, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::WrongPhase {
                op,
                phase: self.phase,
            });
        }
        Ok(())
    }

    fn transition(&mut self, to: Phase) {
        log::info!("phase {:?} -> {:?} (round {})", self.phase, to, self.round);
        self.phase = to;
    }

    pub fn register_learner(&mut self, reg: Registration) -> Result<u16> {
        self.require("register_learner", Phase::AwaitingRegistration)?;
        let k = reg.learner_index;
        if usize::from(k) >= self.expected {
            return Err(Error::UnknownLearner { learner: k });
        }
        if self.registry.contains_key(&k) {
            return Err(Error::DuplicateLearner { learner: k });
        }
        if reg.num_examples == 0 || reg.batch_size == 0 {
            return Err(Error::invalid(format!(
                "learner {k}: example count and batch size must be positive"
            )));
        }
        self.registry.insert(k, reg);
        log::info!("registered learner {k} with {} examples", reg.num_examples);
        if self.registry.len() == self.expected {
            self.transition(Phase::Calibrating);
        }
        Ok(k)
    }

    fn effective_batch(&self, reg: &Registration) -> usize {
        reg.batch_size.min(reg.num_examples)
    }

    /// One-epoch timing tasks for round 0. The trained models are discarded.
    pub fn calibration_tasks(&self) -> Result<Vec<(u16, TaskAssignment)>> {
        self.require("calibration_tasks", Phase::Calibrating)?;
        Ok(self
            .registry
            .values()
            .map(|reg| {
                let batches = reg.num_examples.div_ceil(self.effective_batch(reg)) as u64;
                (
                    reg.learner_index,
                    TaskAssignment {
                        round: 0,
                        community: self.community.clone(),
                        num_batches: batches,
                        hyperparams: self.hyperparams_for(reg),
                    },
                )
            })
            .collect())
    }

    fn hyperparams_for(&self, reg: &Registration) -> Hyperparams {
        Hyperparams {
            batch_size: reg.batch_size,
            ..self.hyperparams
        }
    }

    /// Record a learner's measured median batch time from calibration.
    pub fn receive_calibration(&mut self, learner: u16, batch_time: f64) -> Result<Completion> {
        self.require("receive_calibration", Phase::Calibrating)?;
        if !self.registry.contains_key(&learner) {
            return Err(Error::UnknownLearner { learner });
        }
        if self.calibration.contains_key(&learner) {
            return Err(Error::DuplicateUpdate { learner, round: 0 });
        }
        if !(batch_time.is_finite() && batch_time > 0.0) {
            return Err(Error::invalid(format!(
                "learner {learner} reported batch time {batch_time}"
            )));
        }
        self.calibration.insert(learner, batch_time);
        if self.calibration.len() < self.expected {
            return Ok(Completion::Incomplete {
                received: self.calibration.len(),
                expected: self.expected,
            });
        }
        for (k, t) in &self.calibration {
            let reg = &self.registry[k];
            self.profiles.insert(
                *k,
                LearnerProfile {
                    learner_index: *k,
                    num_examples: reg.num_examples,
                    batch_size: self.effective_batch(reg),
                    batch_time: *t,
                },
            );
        }
        self.transition(Phase::Ready);
        Ok(Completion::Complete)
    }

    /// Plan the next round and emit one assignment per learner.
    pub fn start_round(&mut self) -> Result<Vec<(u16, TaskAssignment)>> {
        self.require("start_round", Phase::Ready)?;
        let profiles = self.profiles();
        let plan = self.policy.plan(&profiles)?;
        self.round += 1;
        let tasks: Vec<_> = self
            .registry
            .values()
            .map(|reg| {
                let batches = plan
                    .batches_for(reg.learner_index)
                    .expect("plan covers every registered learner");
                (
                    reg.learner_index,
                    TaskAssignment {
                        round: self.round,
                        community: self.community.clone(),
                        num_batches: batches,
                        hyperparams: self.hyperparams_for(reg),
                    },
                )
            })
            .collect();
        self.messages_sent += tasks.len() as u64;
        self.plan = Some(plan);
        self.transition(Phase::RoundOpen);
        Ok(tasks)
    }

    fn abort(&mut self, reason: String) -> Error {
        log::error!("aborting round {}: {reason}", self.round);
        self.pending.clear();
        self.transition(Phase::Finished);
        Error::RoundAborted {
            round: self.round,
            reason,
        }
    }

    pub fn receive_update(&mut self, update: LocalUpdate) -> Result<Completion> {
        self.require("receive_update", Phase::RoundOpen)?;
        let k = update.learner_index;
        let Some(reg) = self.registry.get(&k).copied() else {
            return Err(Error::UnknownLearner { learner: k });
        };
        if update.round != self.round {
            return Err(Error::invalid(format!(
                "learner {k} sent an update for round {} during round {}",
                update.round, self.round
            )));
        }
        if self.pending.contains_key(&k) {
            return Err(Error::DuplicateUpdate {
                learner: k,
                round: self.round,
            });
        }
        let params = match update.params.clone().conform_to(self.community.layout()) {
            Ok(p) => p,
            Err(e) => return Err(self.abort(format!("learner {k}: {e}"))),
        };
        if !params.is_finite() {
            return Err(self.abort(format!("learner {k} sent non-finite parameters")));
        }
        let assigned = self
            .plan
            .as_ref()
            .and_then(|p| p.batches_for(k))
            .unwrap_or(0);
        if update.batches_executed != assigned {
            return Err(self.abort(format!(
                "learner {k} executed {} batches, {assigned} assigned",
                update.batches_executed
            )));
        }
        if update.num_examples != reg.num_examples {
            return Err(self.abort(format!(
                "learner {k} reports {} examples, registered {}",
                update.num_examples, reg.num_examples
            )));
        }
        self.messages_received += 1;
        self.pending.insert(k, LocalUpdate { params, ..update });
        if self.pending.len() < self.expected {
            return Ok(Completion::Incomplete {
                received: self.pending.len(),
                expected: self.expected,
            });
        }
        self.transition(Phase::Aggregating);
        Ok(Completion::Complete)
    }

    /// Contribution weights `p_k = |D_k|` in learner-index order.
    pub fn contribution_weights(&self) -> Result<ContributionWeights> {
        let raw: Vec<f64> = self
            .registry
            .values()
            .map(|r| r.num_examples as f64)
            .collect();
        crate::aggregation::normalize_weights(&raw)
    }

    /// Aggregate the buffered updates into the new community model and
    /// evaluate it on `test`.
    pub fn complete_round(&mut self, test: &Dataset, round_time: f64) -> Result<RoundRecord> {
        self.require("complete_round", Phase::Aggregating)?;
        let updates = std::mem::take(&mut self.pending);
        let models: Vec<(&ParameterVector, f64)> = updates
            .values()
            .map(|u| {
                (
                    &u.params,
                    self.registry[&u.learner_index].num_examples as f64,
                )
            })
            .collect();
        self.community = weighted_average(&models)?;
        let metrics = evaluate(&self.spec, &self.community, test)?;

        if self.reestimate {
            for u in updates.values() {
                if let Some(p) = self.profiles.get_mut(&u.learner_index) {
                    p.batch_time = next_batch_time(p.batch_time, u.batch_time, true);
                }
            }
        }

        let record = RoundRecord {
            round: self.round,
            plan: self.plan.take().expect("plan set by start_round"),
            updates_received: updates.len(),
            round_time,
            metrics,
            community: self.community.clone(),
            messages_sent: self.messages_sent,
            messages_received: self.messages_received,
            busy_times: updates.values().map(|u| u.busy_time).collect(),
        };
        self.messages_sent = 0;
        self.messages_received = 0;
        log::info!(
            "round {} complete: mse={} mae={} time={}s",
            record.round,
            metrics.mse,
            metrics.mae,
            round_time
        );
        self.transition(Phase::Ready);
        Ok(record)
    }

    pub fn finish(&mut self) -> Result<()> {
        match self.phase {
            Phase::Ready | Phase::AwaitingRegistration | Phase::Calibrating => {
                self.transition(Phase::Finished);
                Ok(())
            }
            phase => Err(Error::WrongPhase {
                op: "finish",
                phase,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn hp() -> Hyperparams {
        Hyperparams {
            learning_rate: 0.01,
            batch_size: 1,
            seed: 1990,
        }
    }

    fn state(n: usize, policy: Policy) -> FederationState {
        let spec = ModelSpec::linear(2);
        let init = init_model(&spec, 1);
        FederationState::new(spec, init, policy, hp(), n).unwrap()
    }

    fn reg(k: u16, n: usize) -> Registration {
        Registration {
            learner_index: k,
            num_examples: n,
            batch_size: 1,
        }
    }

    fn ready(n: usize, policy: Policy, sizes: &[usize]) -> FederationState {
        let mut s = state(n, policy);
        for (k, &m) in sizes.iter().enumerate() {
            s.register_learner(reg(k as u16, m)).unwrap();
        }
        for k in 0..n as u16 {
            s.receive_calibration(k, 0.12).unwrap();
        }
        s
    }

    fn update_for(
        s: &FederationState,
        k: u16,
        task: &TaskAssignment,
        params: ParameterVector,
    ) -> LocalUpdate {
        LocalUpdate {
            learner_index: k,
            round: task.round,
            params,
            num_examples: s.registry[&k].num_examples,
            batch_time: 0.12,
            busy_time: 0.12 * task.num_batches as f64,
            batches_executed: task.num_batches,
        }
    }

    fn test_set() -> Dataset {
        Dataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 2.0]).unwrap()
    }

    #[test]
    fn registration_flow() {
        let mut s = state(8, Policy::Sync { local_epochs: 4 });
        for k in 0..8 {
            assert_eq!(s.phase(), Phase::AwaitingRegistration);
            s.register_learner(reg(k, 100)).unwrap();
        }
        assert_eq!(s.phase(), Phase::Calibrating);
        assert!(matches!(
            s.register_learner(reg(8, 100)),
            Err(Error::WrongPhase { .. })
        ));
    }

    #[test]
    fn registration_errors() {
        let mut s = state(3, Policy::Sync { local_epochs: 1 });
        s.register_learner(reg(1, 10)).unwrap();
        assert!(matches!(
            s.register_learner(reg(1, 10)),
            Err(Error::DuplicateLearner { learner: 1 })
        ));
        assert!(matches!(
            s.register_learner(reg(3, 10)),
            Err(Error::UnknownLearner { learner: 3 })
        ));
        assert!(s.register_learner(reg(2, 0)).is_err());
    }

    #[test]
    fn sync_rounds_assign_equal_work_for_equal_shards() {
        let mut s = ready(4, Policy::Sync { local_epochs: 4 }, &[50; 4]);
        let tasks = s.start_round().unwrap();
        assert_eq!(s.round(), 1);
        assert!(tasks
            .iter()
            .all(|(_, t)| t.num_batches == 200 && t.round == 1));
    }

    #[test]
    fn semisync_round_with_default_profiles() {
        // Slowest learner holds 2333 examples: 279.96 s per epoch at 0.12 s/batch.
        let sizes = [2333, 1500, 1000, 800, 700, 600, 400, 359];
        let mut s = ready(8, Policy::SemiSync { lambda: 4.0 }, &sizes);
        let tasks = s.start_round().unwrap();
        assert!(tasks.iter().all(|(_, t)| t.num_batches == 9332));
    }

    #[test]
    fn round_counter_and_completion() {
        let mut s = ready(2, Policy::Sync { local_epochs: 1 }, &[3, 5]);
        for r in 1..=3 {
            let tasks = s.start_round().unwrap();
            assert_eq!(s.round(), r);
            let w = s.community().clone();
            let (k0, t0) = &tasks[0];
            let status = s
                .receive_update(update_for(&s, *k0, t0, w.clone()))
                .unwrap();
            assert_eq!(
                status,
                Completion::Incomplete {
                    received: 1,
                    expected: 2
                }
            );
            assert!(matches!(
                s.receive_update(update_for(&s, *k0, t0, w.clone())),
                Err(Error::DuplicateUpdate { .. })
            ));
            let (k1, t1) = &tasks[1];
            assert_eq!(
                s.receive_update(update_for(&s, *k1, t1, w.clone()))
                    .unwrap(),
                Completion::Complete
            );
            let rec = s.complete_round(&test_set(), 1.0).unwrap();
            assert_eq!(rec.round, r);
            assert_eq!(rec.messages_sent + rec.messages_received, 4);
            assert_eq!(s.community(), &w);
            let offline = evaluate(&ModelSpec::linear(2), s.community(), &test_set()).unwrap();
            assert_eq!(rec.metrics, offline);
        }
    }

    #[test]
    fn complete_before_all_updates_is_rejected() {
        let mut s = ready(2, Policy::Sync { local_epochs: 1 }, &[3, 5]);
        let tasks = s.start_round().unwrap();
        let w = s.community().clone();
        s.receive_update(update_for(&s, tasks[0].0, &tasks[0].1, w))
            .unwrap();
        assert!(matches!(
            s.complete_round(&test_set(), 0.0),
            Err(Error::WrongPhase { .. })
        ));
    }

    #[test]
    fn layout_mismatch_aborts_round() {
        let mut s = ready(2, Policy::Sync { local_epochs: 1 }, &[3, 5]);
        let tasks = s.start_round().unwrap();
        let wrong = init_model(&ModelSpec::linear(3), 0);
        let err = s
            .receive_update(update_for(&s, tasks[0].0, &tasks[0].1, wrong))
            .unwrap_err();
        assert!(matches!(err, Error::RoundAborted { round: 1, .. }));
        assert_eq!(s.phase(), Phase::Finished);
    }

    #[test]
    fn short_work_aborts_round() {
        let mut s = ready(1, Policy::Sync { local_epochs: 2 }, &[4]);
        let tasks = s.start_round().unwrap();
        let mut up = update_for(&s, 0, &tasks[0].1, s.community().clone());
        up.batches_executed -= 1;
        assert!(matches!(
            s.receive_update(up),
            Err(Error::RoundAborted { .. })
        ));
    }

    #[test]
    fn unknown_learner_update() {
        let mut s = ready(1, Policy::Sync { local_epochs: 1 }, &[4]);
        let tasks = s.start_round().unwrap();
        let mut up = update_for(&s, 0, &tasks[0].1, s.community().clone());
        up.learner_index = 5;
        assert!(matches!(
            s.receive_update(up),
            Err(Error::UnknownLearner { learner: 5 })
        ));
    }

    #[test]
    fn reestimation_moves_batch_times() {
        let mut s = ready(1, Policy::SemiSync { lambda: 1.0 }, &[10]).with_reestimation(true);
        let tasks = s.start_round().unwrap();
        let mut up = update_for(&s, 0, &tasks[0].1, s.community().clone());
        up.batch_time = 0.2;
        s.receive_update(up).unwrap();
        s.complete_round(&test_set(), 1.2).unwrap();
        assert!((s.profiles()[0].batch_time - 0.16).abs() < 1e-12);
    }
}
