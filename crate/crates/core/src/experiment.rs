//! Experiment configuration and the harness operations built on it: a
//! federated run, the centralized baseline, shard export and schedule
//! inspection.
//!
//! Configs are TOML. Every key has a default, so an empty file describes the
//! default experiment: a 16-feature synthetic regression task split 8356/2090,
//! eight learners on the skewed size preset, synchronous training with four
//! local epochs, learning rate 5e-5, batch size 1, seed 1990 and a simulated
//! clock charging 0.12 s per batch.

use std::fmt::Write as _;
use std::fs;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::data::{
    generate_synthetic, load_csv, partition, write_shards, PartitionPlan, Scheme, Shard,
    ShardSummary, SyntheticTaskSpec, SKEWED_PRESET,
};
use crate::error::{Error, Result};
use crate::federation::{
    run_controller, run_in_process, run_learner, train_centralized, EpochRecord, FederationConfig,
    FederationOutcome,
};
use crate::learner::{Hyperparams, Learner};
use crate::model::{Activation, Dataset, Metrics, ModelKind, ModelSpec};
use crate::policy::{busy_time, epoch_time, idle_time, LearnerProfile, Policy};
use crate::transport::{Codec, TcpSession};

/// Header of the per-round history; `{time}` is `sim_seconds` or `wall_seconds`.
pub const ROUND_CSV_COLUMNS: [&str; 8] = [
    "round",
    "{time}",
    "mse",
    "rmse",
    "mae",
    "corr",
    "policy",
    "messages_cumulative",
];

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const CENTRALIZED_FILE: &str = "centralized.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::rounds")]
    pub rounds: u32,
    /// Stop a federated run once test MAE reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mae: Option<f64>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "defaults::output")]
    pub output: PathBuf,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "defaults::policy")]
    pub policy: Policy,
    #[serde(default)]
    pub hyperparams: HyperparamConfig,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub network: NetworkConfig,
}

mod defaults {
    use super::*;

    pub fn seed() -> u64 {
        1990
    }
    pub fn rounds() -> u32 {
        25
    }
    pub fn output() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn policy() -> Policy {
        Policy::Sync { local_epochs: 4 }
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn true_weight_seed() -> u64 {
        7
    }
    pub fn noise_sigma() -> f64 {
        0.5
    }
    pub fn target_low() -> f64 {
        45.0
    }
    pub fn target_high() -> f64 {
        81.0
    }
    pub fn train_examples() -> usize {
        8356
    }
    pub fn test_examples() -> usize {
        2090
    }
    pub fn learners() -> usize {
        8
    }
    pub fn one() -> usize {
        1
    }
    pub fn scheme() -> Scheme {
        Scheme::SkewedNoniid
    }
    pub fn learning_rate() -> f64 {
        5e-5
    }
    pub fn batch_cost() -> f64 {
        0.12
    }
    pub fn address() -> String {
        "127.0.0.1:7878".into()
    }
    pub fn connect_timeout() -> f64 {
        30.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Inprocess,
    Distributed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::true_weight_seed")]
        true_weight_seed: u64,
        #[serde(default = "defaults::noise_sigma")]
        noise_sigma: f64,
        #[serde(default = "defaults::target_low")]
        target_low: f64,
        #[serde(default = "defaults::target_high")]
        target_high: f64,
        #[serde(default = "defaults::train_examples")]
        train_examples: usize,
        #[serde(default = "defaults::test_examples")]
        test_examples: usize,
    },
    /// Headed CSVs whose last column is the target.
    Csv { train: PathBuf, test: PathBuf },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Synthetic {
            input_dim: defaults::input_dim(),
            true_weight_seed: defaults::true_weight_seed(),
            noise_sigma: defaults::noise_sigma(),
            target_low: defaults::target_low(),
            target_high: defaults::target_high(),
            train_examples: defaults::train_examples(),
            test_examples: defaults::test_examples(),
        }
    }
}

/// Model architecture; the input width comes from the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Linear,
            hidden_dims: Vec::new(),
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "defaults::scheme")]
    pub scheme: Scheme,
    #[serde(default = "defaults::learners")]
    pub learners: usize,
    #[serde(default = "defaults::one")]
    pub buckets_per_learner: usize,
    /// Skewed scheme only; empty means the built-in eight-learner preset.
    #[serde(default)]
    pub size_fractions: Vec<f64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: defaults::scheme(),
            learners: defaults::learners(),
            buckets_per_learner: 1,
            size_fractions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::one")]
    pub batch_size: usize,
}

impl Default for HyperparamConfig {
    fn default() -> Self {
        HyperparamConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockConfig {
    Monotonic,
    Simulated {
        /// Seconds per batch for every learner without its own entry below.
        #[serde(default = "defaults::batch_cost")]
        batch_cost: f64,
        /// Optional per-learner seconds per batch, by learner index.
        #[serde(default)]
        batch_costs: Vec<f64>,
    },
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig::Simulated {
            batch_cost: defaults::batch_cost(),
            batch_costs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Refresh each learner's batch time after every round (EMA, weight 0.5).
    #[serde(default)]
    pub reestimate_batch_time: bool,
    /// `inspect-schedule` overrides: shard sizes and batch seconds per learner.
    #[serde(default)]
    pub num_examples: Vec<usize>,
    #[serde(default)]
    pub batch_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "defaults::address")]
    pub address: String,
    #[serde(default = "defaults::connect_timeout")]
    pub connect_timeout_secs: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            address: defaults::address(),
            connect_timeout_secs: defaults::connect_timeout(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_toml_str("").expect("defaults are valid")
    }
}

fn field(name: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Config { .. } => e,
        Error::InvalidInput(message) => Error::config(name, message),
        other => Error::config(name, other.to_string()),
    }
}

/// Dotted key path (`table.key`) at a byte offset of a TOML document.
fn key_at(src: &str, offset: usize) -> Option<String> {
    let upto = &src[..offset.min(src.len())];
    let line_start = upto.rfind('\n').map_or(0, |i| i + 1);
    let line_end = src[line_start..]
        .find('\n')
        .map_or(src.len(), |i| line_start + i);
    let line = src[line_start..line_end].trim();
    let table = upto[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_owned());
    if line.starts_with('[') {
        return table.or_else(|| Some(line.trim_matches(|c| c == '[' || c == ']').to_owned()));
    }
    let key = line.split('=').next()?.trim();
    if key.is_empty() {
        return table;
    }
    Some(match table {
        Some(t) => format!("{t}.{key}"),
        None => key.to_owned(),
    })
}

impl ExperimentConfig {
    /// Parse and validate. Errors are [`Error::Config`] naming the field.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let name = e
                .span()
                .and_then(|s| key_at(src, s.start))
                .unwrap_or_else(|| "config".into());
            Error::config(name, e.message().trim().to_owned())
        })?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&src)
    }

    /// Validate and fill derived defaults (the skewed preset).
    pub fn resolved(mut self) -> Result<Self> {
        let p = &mut self.partition;
        if p.learners == 0 || p.learners > usize::from(u16::MAX) {
            return Err(Error::config(
                "partition.learners",
                format!("must be in 1..={}", u16::MAX),
            ));
        }
        if p.scheme == Scheme::SkewedNoniid && p.size_fractions.is_empty() {
            if p.learners != SKEWED_PRESET.len() {
                return Err(Error::config(
                    "partition.size_fractions",
                    format!(
                        "required for {} learners; the built-in preset has {}",
                        p.learners,
                        SKEWED_PRESET.len()
                    ),
                ));
            }
            p.size_fractions = SKEWED_PRESET.to_vec();
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if let Some(t) = self.target_mae {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config("target_mae", "must be a positive number"));
            }
        }
        let n = self.partition.learners;
        if self.partition.scheme == Scheme::SkewedNoniid && self.partition.size_fractions.len() != n
        {
            return Err(Error::config(
                "partition.size_fractions",
                format!(
                    "{} fractions for {n} learners",
                    self.partition.size_fractions.len()
                ),
            ));
        }
        match &self.task {
            TaskConfig::Synthetic {
                train_examples,
                test_examples,
                ..
            } => {
                self.synthetic_spec()
                    .expect("synthetic")
                    .validate()
                    .map_err(field("task"))?;
                if *train_examples == 0 {
                    return Err(Error::config("task.train_examples", "must be positive"));
                }
                if *test_examples == 0 {
                    return Err(Error::config("task.test_examples", "must be positive"));
                }
                self.partition_plan()
                    .validate(*train_examples)
                    .map_err(field("partition"))?;
            }
            TaskConfig::Csv { train, test } => {
                for (name, path) in [("task.train", train), ("task.test", test)] {
                    if !path.is_file() {
                        return Err(Error::config(
                            name,
                            format!("{} does not exist", path.display()),
                        ));
                    }
                }
            }
        }
        if self.model.kind == ModelKind::Linear && !self.model.hidden_dims.is_empty() {
            return Err(Error::config(
                "model.hidden_dims",
                "must be empty for a linear model",
            ));
        }
        self.model_spec(1).validate().map_err(field("model"))?;
        self.policy.validate().map_err(field("policy"))?;
        self.run_hyperparams()
            .validate()
            .map_err(field("hyperparams"))?;
        if let ClockConfig::Simulated {
            batch_cost,
            batch_costs,
        } = &self.clock
        {
            if !(batch_cost.is_finite() && *batch_cost > 0.0) {
                return Err(Error::config(
                    "clock.batch_cost",
                    "must be a positive number of seconds",
                ));
            }
            if !batch_costs.is_empty() && batch_costs.len() != n {
                return Err(Error::config(
                    "clock.batch_costs",
                    format!("{} entries for {n} learners", batch_costs.len()),
                ));
            }
            if batch_costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
                return Err(Error::config(
                    "clock.batch_costs",
                    "entries must be positive seconds",
                ));
            }
        }
        let s = &self.schedule;
        if !s.num_examples.is_empty() && s.num_examples.len() != n {
            return Err(Error::config(
                "schedule.num_examples",
                format!("{} entries for {n} learners", s.num_examples.len()),
            ));
        }
        if !s.batch_times.is_empty() && s.batch_times.len() != n {
            return Err(Error::config(
                "schedule.batch_times",
                format!("{} entries for {n} learners", s.batch_times.len()),
            ));
        }
        if self.mode == Mode::Distributed {
            self.network
                .address
                .parse::<SocketAddr>()
                .map_err(|e| Error::config("network.address", e.to_string()))?;
        }
        if !(self.network.connect_timeout_secs.is_finite()
            && self.network.connect_timeout_secs >= 0.0)
        {
            return Err(Error::config(
                "network.connect_timeout_secs",
                "must be nonnegative",
            ));
        }
        Ok(())
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn synthetic_spec(&self) -> Option<SyntheticTaskSpec> {
        match self.task {
            TaskConfig::Synthetic {
                input_dim,
                true_weight_seed,
                noise_sigma,
                target_low,
                target_high,
                ..
            } => Some(SyntheticTaskSpec {
                input_dim,
                true_weight_seed,
                noise_sigma,
                target_low,
                target_high,
            }),
            TaskConfig::Csv { .. } => None,
        }
    }

    /// Train and test sets. Synthetic rows are drawn in one stream from
    /// `seed` and split in order.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.task {
            TaskConfig::Synthetic {
                train_examples,
                test_examples,
                ..
            } => {
                let spec = self.synthetic_spec().expect("synthetic");
                generate_synthetic(&spec, train_examples + test_examples, self.seed)?
                    .split_at(*train_examples)
            }
            TaskConfig::Csv { train, test } => {
                let (train, test) = (load_csv(train)?, load_csv(test)?);
                if train.dim() != test.dim() {
                    return Err(Error::config(
                        "task.test",
                        format!("{} features, train set has {}", test.dim(), train.dim()),
                    ));
                }
                Ok((train, test))
            }
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            activation: self.model.activation,
        }
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        let p = &self.partition;
        PartitionPlan {
            scheme: p.scheme,
            num_learners: p.learners,
            buckets_per_learner: p.buckets_per_learner,
            size_fractions: p.size_fractions.clone(),
            seed: self.seed,
        }
    }

    pub fn run_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.hyperparams.learning_rate,
            batch_size: self.hyperparams.batch_size,
            seed: self.seed,
        }
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.clock, ClockConfig::Simulated { .. })
    }

    /// Seconds per batch charged to learner `k`, if the clock is simulated.
    pub fn batch_cost(&self, k: usize) -> Option<f64> {
        match &self.clock {
            ClockConfig::Monotonic => None,
            ClockConfig::Simulated {
                batch_cost,
                batch_costs,
            } => Some(batch_costs.get(k).copied().unwrap_or(*batch_cost)),
        }
    }

    pub fn learner_clock(&self, k: usize) -> Clock {
        self.batch_cost(k)
            .map_or(Clock::Monotonic, Clock::simulated_secs)
    }

    pub fn federation_config(&self, input_dim: usize) -> FederationConfig {
        FederationConfig {
            spec: self.model_spec(input_dim),
            policy: self.policy,
            hyperparams: self.run_hyperparams(),
            rounds: self.rounds,
            num_learners: self.partition.learners,
            reestimate_batch_time: self.schedule.reestimate_batch_time,
            target_mae: self.target_mae,
            simulated_time: self.is_simulated(),
        }
    }

    pub fn shards(&self, train: &Dataset) -> Result<Vec<Shard>> {
        partition(train, &self.partition_plan())
    }

    pub fn learners(&self, train: &Dataset) -> Result<Vec<Learner>> {
        let spec = self.model_spec(train.dim());
        self.shards(train)?
            .into_iter()
            .map(|s| {
                let clock = self.learner_clock(usize::from(s.learner_index));
                Learner::new(s.learner_index, spec.clone(), s.data, clock)
            })
            .collect()
    }

    /// Centralized epochs matching a federated run's work: `R·E` for sync,
    /// `⌊R·λ⌋` for semi-sync.
    pub fn centralized_epochs(&self) -> u32 {
        match self.policy {
            Policy::Sync { local_epochs } => self.rounds.saturating_mul(local_epochs),
            Policy::SemiSync { lambda } => (f64::from(self.rounds) * lambda).floor() as u32,
        }
    }

    fn time_column(&self) -> &'static str {
        if self.is_simulated() {
            "sim_seconds"
        } else {
            "wall_seconds"
        }
    }

    fn csv_header(&self) -> String {
        ROUND_CSV_COLUMNS
            .iter()
            .map(|c| {
                if *c == "{time}" {
                    self.time_column()
                } else {
                    c
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn csv_row(out: &mut String, round: u32, secs: f64, m: &Metrics, tag: &str, messages: u64) {
    writeln!(
        out,
        "{round},{secs},{},{},{},{},{tag},{messages}",
        m.mse, m.rmse, m.mae, m.corr
    )
    .expect("writing to a String");
}

/// One row per completed round; time is cumulative and includes calibration.
pub fn rounds_csv(cfg: &ExperimentConfig, outcome: &FederationOutcome) -> String {
    let mut out = cfg.csv_header();
    out.push('\n');
    let mut messages = 0;
    for (r, t) in outcome.history.iter().zip(outcome.cumulative_times()) {
        messages += r.messages_sent + r.messages_received;
        csv_row(&mut out, r.round, t, &r.metrics, cfg.policy.tag(), messages);
    }
    out
}

/// Same schema as [`rounds_csv`]; the round column counts epochs and the
/// policy column reads `centralized`.
pub fn centralized_csv(cfg: &ExperimentConfig, history: &[EpochRecord]) -> String {
    let mut out = cfg.csv_header();
    out.push('\n');
    let mut t = 0.0;
    for e in history {
        t += e.epoch_time;
        csv_row(&mut out, e.epoch, t, &e.metrics, "centralized", 0);
    }
    out
}

/// Federated run in this process.
pub fn run_federated(cfg: &ExperimentConfig) -> Result<FederationOutcome> {
    let (train, test) = cfg.load_data()?;
    let learners = cfg.learners(&train)?;
    run_in_process(
        &cfg.federation_config(train.dim()),
        learners,
        &test,
        cfg.seed,
    )
}

fn prepare_output(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

/// Run the federation, write `rounds.csv` and the resolved config to `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<FederationOutcome> {
    prepare_output(cfg, out)?;
    let outcome = run_federated(cfg)?;
    fs::write(out.join(ROUNDS_FILE), rounds_csv(cfg, &outcome))?;
    Ok(outcome)
}

pub fn centralized(cfg: &ExperimentConfig, out: &Path) -> Result<(Metrics, Vec<EpochRecord>)> {
    prepare_output(cfg, out)?;
    let (train, test) = cfg.load_data()?;
    let clock = cfg.learner_clock(0);
    let result = train_centralized(
        &cfg.model_spec(train.dim()),
        &train,
        &test,
        &cfg.run_hyperparams(),
        cfg.centralized_epochs(),
        &clock,
    )?;
    fs::write(out.join(CENTRALIZED_FILE), centralized_csv(cfg, &result.1))?;
    Ok(result)
}

/// Write `shard_<k>.csv` files and `manifest.csv` to `out`.
pub fn export_partition(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ShardSummary>> {
    prepare_output(cfg, out)?;
    let (train, _) = cfg.load_data()?;
    write_shards(out, &cfg.shards(&train)?)
}

/// Learner profiles for schedule inspection: explicit `[schedule]` values
/// where given, otherwise shard sizes from the partition and batch times from
/// the simulated clock.
pub fn schedule_profiles(cfg: &ExperimentConfig) -> Result<Vec<LearnerProfile>> {
    let n = cfg.partition.learners;
    let sizes = if cfg.schedule.num_examples.is_empty() {
        let (train, _) = cfg.load_data()?;
        cfg.shards(&train)?.iter().map(|s| s.data.len()).collect()
    } else {
        cfg.schedule.num_examples.clone()
    };
    let times = if cfg.schedule.batch_times.is_empty() {
        (0..n)
            .map(|k| {
                cfg.batch_cost(k).ok_or_else(|| {
                    Error::config(
                        "schedule.batch_times",
                        "required unless the clock is simulated",
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        cfg.schedule.batch_times.clone()
    };
    sizes
        .into_iter()
        .zip(times)
        .enumerate()
        .map(|(k, (num_examples, batch_time))| {
            let p = LearnerProfile {
                learner_index: k as u16,
                num_examples,
                batch_size: cfg.hyperparams.batch_size,
                batch_time,
            };
            p.validate().map_err(field("schedule"))?;
            Ok(p)
        })
        .collect()
}

/// Plain-text table of the plan the configured policy would issue.
pub fn schedule_table(cfg: &ExperimentConfig) -> Result<String> {
    let profiles = schedule_profiles(cfg)?;
    let plan = cfg.policy.plan(&profiles)?;
    let busy = busy_time(&profiles, &plan)?;
    let idle = idle_time(&profiles, &plan)?;
    let mut out = String::new();
    let _ = writeln!(out, "policy: {}", cfg.policy.tag());
    match plan.t_max {
        Some(t) => {
            let _ = writeln!(out, "t_max: {t:.3} s");
        }
        None => {
            let _ = writeln!(out, "t_max: -");
        }
    }
    let _ = writeln!(
        out,
        "{:>7} {:>9} {:>10} {:>10} {:>12} {:>12} {:>12}",
        "learner", "examples", "t_batch_s", "batches", "epoch_s", "busy_s", "idle_s"
    );
    for (((p, a), b), i) in profiles.iter().zip(&plan.allocations).zip(&busy).zip(&idle) {
        let _ = writeln!(
            out,
            "{:>7} {:>9} {:>10.4} {:>10} {:>12.3} {:>12.3} {:>12.3}",
            p.learner_index,
            p.num_examples,
            p.batch_time,
            a.num_batches,
            epoch_time(p),
            b,
            i
        );
    }
    Ok(out)
}

/// Controller for distributed mode: accept one connection per learner on
/// `listener`, then run the federation and write outputs to `out`.
pub fn serve_controller(
    cfg: &ExperimentConfig,
    listener: TcpListener,
    out: &Path,
) -> Result<FederationOutcome> {
    prepare_output(cfg, out)?;
    let (train, test) = cfg.load_data()?;
    let codec = Codec::default();
    let mut sessions = Vec::with_capacity(cfg.partition.learners);
    while sessions.len() < cfg.partition.learners {
        let (stream, peer) = listener.accept()?;
        log::info!("learner connected from {peer}");
        sessions.push(TcpSession::new(stream, codec)?);
    }
    let outcome = run_controller(
        &cfg.federation_config(train.dim()),
        sessions,
        &test,
        cfg.seed,
    )?;
    fs::write(out.join(ROUNDS_FILE), rounds_csv(cfg, &outcome))?;
    Ok(outcome)
}

/// Learner `k` for distributed mode. Rebuilds its shard from the config,
/// connects to `addr` (retrying until the configured timeout) and serves
/// assignments until shutdown.
pub fn serve_learner(cfg: &ExperimentConfig, addr: SocketAddr, k: u16) -> Result<()> {
    if usize::from(k) >= cfg.partition.learners {
        return Err(Error::config(
            "--learner",
            format!(
                "index {k} out of range for {} learners",
                cfg.partition.learners
            ),
        ));
    }
    let (train, _) = cfg.load_data()?;
    let learner = cfg
        .learners(&train)?
        .into_iter()
        .nth(usize::from(k))
        .expect("index checked");
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.network.connect_timeout_secs);
    let stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                log::debug!("learner {k}: connect to {addr} failed ({e}), retrying");
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let mut session = TcpSession::new(stream, Codec::default())?;
    run_learner(&learner, &mut session, cfg.hyperparams.batch_size)
}
