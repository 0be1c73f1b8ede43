//! Drives a federation over transport sessions: registration, calibration,
//! `R` rounds of assign / train / aggregate, then shutdown.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::clock::{secs_to_duration, Clock};
use crate::controller::{Completion, FederationState, Registration, RoundRecord};
use crate::error::{Error, Result};
use crate::learner::{local_sgd, Hyperparams, Learner, TaskAssignment};
use crate::model::{evaluate, init_model, Dataset, Metrics, ModelSpec, ParameterVector};
use crate::policy::{LearnerProfile, Policy};
use crate::rng::hash_seed;
use crate::transport::{
    in_proc_pair, recv_message, send_message, Codec, Message, Metered, Session, StatsSnapshot,
    TransportStats,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub spec: ModelSpec,
    pub policy: Policy,
    pub hyperparams: Hyperparams,
    pub rounds: u32,
    pub num_learners: usize,
    pub reestimate_batch_time: bool,
    /// Stop early once the community model's test MAE is at or below this.
    pub target_mae: Option<f64>,
    /// Round durations come from learner-reported simulated busy time
    /// instead of the controller's wall clock.
    pub simulated_time: bool,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub history: Vec<RoundRecord>,
    pub community: ParameterVector,
    pub initial_metrics: Metrics,
    /// Calibrated learner profiles, by learner index.
    pub profiles: Vec<LearnerProfile>,
    /// Seconds spent in the calibration round.
    pub calibration_time: f64,
    pub transport: StatsSnapshot,
}

impl FederationOutcome {
    /// Round-by-round cumulative seconds including calibration. Summed in
    /// whole nanoseconds so long runs do not pick up float drift.
    pub fn cumulative_times(&self) -> Vec<f64> {
        let mut t = secs_to_duration(self.calibration_time);
        self.history
            .iter()
            .map(|r| {
                t += secs_to_duration(r.round_time);
                t.as_secs_f64()
            })
            .collect()
    }
}

fn failed(learner: u16, round: u32, e: impl std::fmt::Display) -> Error {
    Error::LearnerFailed {
        learner,
        round,
        reason: e.to_string(),
    }
}

/// Receive each learner's reply to the current assignment, concurrently, and
/// hand it to `on_update` under the shared lock.
fn collect<S, F>(
    sessions: &mut [(u16, S)],
    state: &Mutex<FederationState>,
    round: u32,
    on_update: F,
) -> Result<Vec<f64>>
where
    S: Session,
    F: Fn(&mut FederationState, crate::learner::LocalUpdate) -> Result<Completion> + Sync,
{
    let results: Vec<Result<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sessions
            .iter_mut()
            .map(|(k, session)| {
                let k = *k;
                let on_update = &on_update;
                scope.spawn(move || -> Result<f64> {
                    let (env, msg) = recv_message(session).map_err(|e| failed(k, round, e))?;
                    if env.learner_index != k {
                        return Err(failed(
                            k,
                            round,
                            format!("frame claims learner {}", env.learner_index),
                        ));
                    }
                    match msg {
                        Message::Update(update) => {
                            let busy = update.busy_time;
                            let mut st = state.lock().expect("controller lock poisoned");
                            on_update(&mut st, update)?;
                            Ok(busy)
                        }
                        Message::Error(reason) => Err(failed(k, round, reason)),
                        other => Err(failed(
                            k,
                            round,
                            format!("unexpected {:?} message", other.kind()),
                        )),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("receiver thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

fn round_time(simulated: bool, busy: &[f64], started: Instant) -> f64 {
    if simulated {
        busy.iter().copied().fold(0.0, f64::max)
    } else {
        started.elapsed().as_secs_f64()
    }
}

/// Run the controller side over already-connected sessions. Each session
/// must open with a REGISTER frame.
pub fn run_controller<S: Session>(
    cfg: &FederationConfig,
    sessions: Vec<S>,
    test: &Dataset,
    init_seed: u64,
) -> Result<FederationOutcome> {
    if sessions.len() != cfg.num_learners {
        return Err(Error::invalid(format!(
            "{} sessions for {} learners",
            sessions.len(),
            cfg.num_learners
        )));
    }
    let stats = Arc::new(TransportStats::default());
    let initial = init_model(&cfg.spec, init_seed);
    let initial_metrics = evaluate(&cfg.spec, &initial, test)?;
    let mut state = FederationState::new(
        cfg.spec.clone(),
        initial,
        cfg.policy,
        cfg.hyperparams,
        cfg.num_learners,
    )?
    .with_reestimation(cfg.reestimate_batch_time);

    // Registration: learn which learner sits behind each session.
    let mut sessions: Vec<(u16, Metered<S>)> = sessions
        .into_iter()
        .map(|s| {
            let mut s = Metered::new(s, stats.clone());
            let (env, msg) = recv_message(&mut s)?;
            match msg {
                Message::Register {
                    num_examples,
                    batch_size,
                } => {
                    let k = state.register_learner(Registration {
                        learner_index: env.learner_index,
                        num_examples: num_examples as usize,
                        batch_size: batch_size as usize,
                    })?;
                    Ok((k, s))
                }
                other => Err(Error::invalid(format!(
                    "expected REGISTER, got {:?}",
                    other.kind()
                ))),
            }
        })
        .collect::<Result<_>>()?;
    sessions.sort_by_key(|(k, _)| *k);

    let result = drive(cfg, &mut sessions, state, test);
    // Learners exit on SHUTDOWN; on failure dropping the sessions releases them.
    if result.is_ok() {
        for (k, s) in sessions.iter_mut() {
            let _ = send_message(s, &Message::Shutdown, 0, *k);
        }
    }
    let (history, community, profiles, calibration_time) = result?;
    Ok(FederationOutcome {
        history,
        community,
        initial_metrics,
        profiles,
        calibration_time,
        transport: stats.snapshot(),
    })
}

type Driven = (Vec<RoundRecord>, ParameterVector, Vec<LearnerProfile>, f64);

fn drive<S: Session>(
    cfg: &FederationConfig,
    sessions: &mut [(u16, S)],
    state: FederationState,
    test: &Dataset,
) -> Result<Driven> {
    let state = Mutex::new(state);
    let lock = || state.lock().expect("controller lock poisoned");

    let started = Instant::now();
    let tasks = lock().calibration_tasks()?;
    send_all(sessions, &tasks)?;
    let busy = collect(sessions, &state, 0, |st, u| {
        st.receive_calibration(u.learner_index, u.batch_time)
    })?;
    let calibration_time = round_time(cfg.simulated_time, &busy, started);

    let mut history = Vec::new();
    for _ in 0..cfg.rounds {
        let started = Instant::now();
        let tasks = lock().start_round()?;
        let round = tasks.first().map_or(0, |(_, t)| t.round);
        send_all(sessions, &tasks)?;
        let busy = collect(sessions, &state, round, |st, u| st.receive_update(u))?;
        let record = lock().complete_round(test, round_time(cfg.simulated_time, &busy, started))?;
        let reached = cfg.target_mae.is_some_and(|t| record.metrics.mae <= t);
        history.push(record);
        if reached {
            break;
        }
    }
    let mut st = lock();
    st.finish()?;
    Ok((
        history,
        st.community().clone(),
        st.profiles(),
        calibration_time,
    ))
}

fn send_all<S: Session>(sessions: &mut [(u16, S)], tasks: &[(u16, TaskAssignment)]) -> Result<()> {
    for ((k, session), (tk, task)) in sessions.iter_mut().zip(tasks) {
        debug_assert_eq!(k, tk);
        send_message(session, &Message::Assign(task.clone()), task.round, *k)
            .map_err(|e| failed(*k, task.round, e))?;
    }
    Ok(())
}

/// Learner side: register, then serve assignments until SHUTDOWN.
pub fn run_learner(learner: &Learner, session: &mut impl Session, batch_size: usize) -> Result<()> {
    let k = learner.index;
    let register = Message::Register {
        num_examples: learner.shard.len() as u64,
        batch_size: batch_size as u64,
    };
    send_message(session, &register, 0, k)?;
    loop {
        let (env, msg) = recv_message(session)?;
        match msg {
            Message::Assign(task) => match learner.execute(&task) {
                Ok(update) => send_message(session, &Message::Update(update), task.round, k)?,
                Err(e) => {
                    let _ = send_message(session, &Message::Error(e.to_string()), task.round, k);
                    return Err(e);
                }
            },
            Message::Community(_) => {}
            Message::Shutdown => {
                log::info!("learner {k}: shutdown after round {}", env.round);
                return Ok(());
            }
            other => {
                return Err(Error::invalid(format!(
                    "learner {k}: unexpected {:?} from controller",
                    other.kind()
                )))
            }
        }
    }
}

/// Whole federation inside one process: one thread per learner, sessions
/// over in-process channels.
pub fn run_in_process(
    cfg: &FederationConfig,
    learners: Vec<Learner>,
    test: &Dataset,
    init_seed: u64,
) -> Result<FederationOutcome> {
    let codec = Codec::default();
    let batch_size = cfg.hyperparams.batch_size;
    let (controller_ends, learner_ends): (Vec<_>, Vec<_>) =
        learners.iter().map(|_| in_proc_pair(codec)).unzip();

    std::thread::scope(|scope| {
        let handles: Vec<_> = learners
            .iter()
            .zip(learner_ends)
            .map(|(learner, mut end)| {
                scope.spawn(move || run_learner(learner, &mut end, batch_size))
            })
            .collect();
        let outcome = run_controller(cfg, controller_ends, test, init_seed);
        let learner_results: Vec<Result<()>> = handles
            .into_iter()
            .map(|h| h.join().expect("learner thread panicked"))
            .collect();
        let outcome = outcome?;
        for r in learner_results {
            r?;
        }
        Ok(outcome)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub params: ParameterVector,
    pub metrics: Metrics,
    /// Seconds spent on this epoch.
    pub epoch_time: f64,
}

/// Train one model on the undivided data for `epochs` epochs, evaluating
/// after each. Epoch `e` (from 1) shuffles with the same seed a lone learner
/// 0 would use in round `e`, so a one-learner synchronous federation with
/// one local epoch per round retraces this run exactly.
pub fn train_centralized(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    hyperparams: &Hyperparams,
    epochs: u32,
    clock: &Clock,
) -> Result<(Metrics, Vec<EpochRecord>)> {
    hyperparams.validate()?;
    let mut params = init_model(spec, hyperparams.seed);
    let initial = evaluate(spec, &params, test)?;
    let batch_size = hyperparams.effective_batch_size(train.len());
    let batches = train.len().div_ceil(batch_size) as u64;
    let mut history = Vec::with_capacity(epochs as usize);
    for epoch in 1..=epochs {
        let started = Instant::now();
        let seed = hash_seed(hyperparams.seed, epoch, 0);
        let run = local_sgd(
            spec,
            &params,
            train,
            hyperparams.learning_rate,
            batch_size,
            batches,
            seed,
            clock,
        )?;
        params = run.params;
        let epoch_time = if clock.is_simulated() {
            run.batch_times
                .iter()
                .sum::<std::time::Duration>()
                .as_secs_f64()
        } else {
            started.elapsed().as_secs_f64()
        };
        history.push(EpochRecord {
            epoch,
            metrics: evaluate(spec, &params, test)?,
            params: params.clone(),
            epoch_time,
        });
    }
    Ok((initial, history))
}
