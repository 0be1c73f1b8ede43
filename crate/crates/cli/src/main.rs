//! `fedorch`: run federated experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use fedorch_core::experiment::{self, ExperimentConfig, Mode};
use fedorch_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "fedorch",
    version,
    about = "Federated learning orchestration and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a federated experiment and write rounds.csv.
    Run(RunArgs),
    /// Train on the undivided data with matched work and write centralized.csv.
    Centralized(Common),
    /// Write per-learner shard CSVs and a manifest.
    Partition(Common),
    /// Print the per-learner batch plan of the configured policy.
    InspectSchedule(ConfigArg),
}

#[derive(clap::Args, Debug)]
struct ConfigArg {
    /// Experiment config (TOML). Omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct Common {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    /// Distributed controller: listen here and wait for external learners.
    #[arg(long, conflicts_with = "connect")]
    listen: Option<SocketAddr>,
    /// Distributed learner: connect to this controller.
    #[arg(long, requires = "learner")]
    connect: Option<SocketAddr>,
    /// Learner index served by this process (with --connect).
    #[arg(long, requires = "connect")]
    learner: Option<u16>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CliMode {
    Inprocess,
    Distributed,
}

fn load(arg: &ConfigArg) -> Result<ExperimentConfig, Error> {
    match &arg.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cfg: &ExperimentConfig, common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.clone())
}

fn print_final(outcome: &fedorch_core::federation::FederationOutcome) {
    let rounds = outcome.history.len();
    let m = outcome
        .history
        .last()
        .map_or(outcome.initial_metrics, |r| r.metrics);
    let time = outcome
        .cumulative_times()
        .last()
        .copied()
        .unwrap_or(outcome.calibration_time);
    println!(
        "rounds={rounds} time_s={time:.3} mse={:.6} rmse={:.6} mae={:.6} corr={:.6} model_messages={}",
        m.mse,
        m.rmse,
        m.mae,
        m.corr,
        outcome.transport.model_messages()
    );
}

fn spawn_learners(config: Option<&Path>, addr: SocketAddr, n: usize) -> Result<Vec<Child>, Error> {
    let exe = std::env::current_exe()?;
    (0..n)
        .map(|k| {
            let mut cmd = Command::new(&exe);
            cmd.arg("run");
            if let Some(path) = config {
                cmd.arg("--config").arg(path);
            }
            cmd.args([
                "--mode",
                "distributed",
                "--connect",
                &addr.to_string(),
                "--learner",
                &k.to_string(),
            ]);
            Ok(cmd.spawn()?)
        })
        .collect()
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let mut cfg = load(&args.common.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            CliMode::Inprocess => Mode::Inprocess,
            CliMode::Distributed => Mode::Distributed,
        };
    }
    if args.connect.is_some() || args.listen.is_some() {
        cfg.mode = Mode::Distributed;
    }
    let cfg = cfg.resolved()?;
    let out = out_dir(&cfg, &args.common);

    if let (Some(addr), Some(k)) = (args.connect, args.learner) {
        return experiment::serve_learner(&cfg, addr, k);
    }
    let outcome = match cfg.mode {
        Mode::Inprocess => experiment::run(&cfg, &out)?,
        Mode::Distributed => {
            let bind = match args.listen {
                Some(addr) => addr,
                None => cfg.network.address.parse().map_err(|e| Error::Config {
                    field: "network.address".into(),
                    message: format!("{e}"),
                })?,
            };
            let listener = TcpListener::bind(bind)?;
            let addr = listener.local_addr()?;
            log::info!("controller listening on {addr}");
            // Without --listen this process also launches the learners.
            let mut children = if args.listen.is_none() {
                spawn_learners(
                    args.common.config.config.as_deref(),
                    addr,
                    cfg.partition.learners,
                )?
            } else {
                Vec::new()
            };
            let result = experiment::serve_controller(&cfg, listener, &out);
            let mut child_failed = false;
            for child in &mut children {
                if result.is_err() {
                    let _ = child.kill();
                }
                child_failed |= !child.wait()?.success();
            }
            let outcome = result?;
            if child_failed {
                return Err(Error::InvalidInput(
                    "a learner process exited with an error".into(),
                ));
            }
            outcome
        }
    };
    print_final(&outcome);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Centralized(common) => {
            let cfg = load(&common.config)?;
            let (initial, history) = experiment::centralized(&cfg, &out_dir(&cfg, common))?;
            let m = history.last().map_or(initial, |e| e.metrics);
            println!(
                "epochs={} mse={:.6} rmse={:.6} mae={:.6} corr={:.6}",
                history.len(),
                m.mse,
                m.rmse,
                m.mae,
                m.corr
            );
            Ok(())
        }
        Cmd::Partition(common) => {
            let cfg = load(&common.config)?;
            let out = out_dir(&cfg, common);
            for s in experiment::export_partition(&cfg, &out)? {
                println!(
                    "learner {}: {} rows, target [{:.3}, {:.3}], mean {:.3}",
                    s.learner_index, s.rows, s.target_min, s.target_max, s.target_mean
                );
            }
            Ok(())
        }
        Cmd::InspectSchedule(arg) => {
            let cfg = load(arg)?;
            print!("{}", experiment::schedule_table(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDORCH_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
