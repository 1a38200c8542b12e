use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avgrl::deep::{train_deep_from, DeepAgentConfig};
use avgrl::env::{EnvSpec, DEFAULT_STATE_CAP};
use avgrl::harness::{
    aggregate_envelope, gap_report, run_experiment, summarize_tail, write_envelope_csv,
    write_outputs, ExperimentConfig, Manifest, DEFAULT_TAIL,
};
use avgrl::mdp::TabularMdp;
use avgrl::neural::DuelingNet;
use avgrl::record::{AgentKind, RunRecord};
use avgrl::solvers::{discounted_value_iteration, relative_value_iteration};
use avgrl::tabular::{train_tabular, LearningConfig};
use avgrl::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "avgrl", version, about = "Average-reward RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Average,
    Discounted,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an MDP exactly under the average or discounted criterion.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long, value_enum, default_value = "average")]
        criterion: Criterion,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        ref_state: usize,
    },
    /// Train one agent and write its evaluation series as CSV.
    Train {
        #[arg(long)]
        agent: AgentKind,
        #[arg(long)]
        env: EnvSpec,
        /// JSON agent config; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Step budget when no config file is given.
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 1_000)]
        eval_every: usize,
        /// Deep agents: write final online parameters here.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
        /// Deep agents: start from these parameters.
        #[arg(long)]
        load_checkpoint: Option<PathBuf>,
    },
    /// Run a seeds × references experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean/min/max envelope over the records of an experiment directory.
    Aggregate {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean and standard deviation of the last evaluations in a CSV.
    Summarize {
        csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAIL)]
        tail: usize,
    },
    /// Average reward lost by discounted-optimal policies.
    Gap {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9,0.99,0.999")]
        gammas: Vec<f64>,
    },
    /// Write the exact tabular model of a small environment as MDP JSON.
    Export {
        #[arg(long)]
        env: EnvSpec,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
    },
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn solve(mdp: &Path, criterion: Criterion, gamma: f64, tol: f64, ref_state: usize) -> Result<()> {
    let mdp = TabularMdp::load(mdp)?;
    match criterion {
        Criterion::Average => {
            let sol = relative_value_iteration(&mdp, ref_state, tol)?;
            print_json(&json!({
                "gain": sol.gain,
                "bias": sol.bias,
                "policy": sol.policy.actions(),
                "residual": sol.residual,
                "iterations": sol.iterations,
            }))
        }
        Criterion::Discounted => {
            let sol = discounted_value_iteration(&mdp, gamma, tol)?;
            print_json(&json!({
                "values": sol.values,
                "policy": sol.policy.actions(),
                "gamma": gamma,
                "residual": sol.residual,
                "iterations": sol.iterations,
            }))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    agent: AgentKind,
    spec: &EnvSpec,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    steps: usize,
    eval_every: usize,
    save: Option<&Path>,
    load: Option<&Path>,
) -> Result<()> {
    let env = spec.build()?;
    let mut record = if agent.is_deep() {
        let mut c = match config {
            Some(p) => read_json::<DeepAgentConfig>(p)?,
            None => DeepAgentConfig::new(steps, eval_every, 0),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        let init = load.map(DuelingNet::load).transpose()?;
        let outcome = train_deep_from(agent, env.as_ref(), &c, init)?;
        if let Some(path) = save {
            outcome.online.save(path)?;
        }
        outcome.record
    } else {
        if save.is_some() || load.is_some() {
            return Err(Error::Contract(
                "checkpoints apply to deep agents only".into(),
            ));
        }
        let mut c = match config {
            Some(p) => read_json::<LearningConfig>(p)?,
            None => LearningConfig::new(steps, eval_every, 0),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        train_tabular(agent, env.as_ref(), &c)?
    };
    record.env = spec.to_string();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    record.write_csv(fs::File::create(out)?)?;
    if let Some(last) = record.series.last() {
        eprintln!(
            "final eval_avg_reward {} at step {}",
            last.eval_avg_reward, last.step
        );
    }
    Ok(())
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut config = ExperimentConfig::load(config)?;
    let dir = out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Contract("no output directory (set output_dir or --out)".into()))?;
    config.output_dir = None;
    let outcomes = run_experiment(&config)?;
    let manifest = write_outputs(&config, &outcomes, &dir)?;
    let failed = manifest
        .records
        .iter()
        .filter(|r| r.error.is_some())
        .count();
    for r in manifest.records.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell seed={} ref={:?} failed: {}",
            r.seed,
            r.ref_id,
            r.error.as_deref().unwrap_or_default()
        );
    }
    println!(
        "{} cells, {} failed, written to {}",
        manifest.records.len(),
        failed,
        dir.display()
    );
    Ok(())
}

fn aggregate(dir: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = Manifest::load(dir)?;
    let records = manifest.load_records(dir)?;
    let envelope = aggregate_envelope(&records)?;
    match out {
        Some(path) => write_envelope_csv(&envelope, fs::File::create(path)?),
        None => write_envelope_csv(&envelope, io::stdout().lock()),
    }
}

fn summarize(csv: &Path, tail: usize) -> Result<()> {
    let record = RunRecord::load_csv(csv, AgentKind::Q)?;
    let (mean, std) = summarize_tail(&record, tail)?;
    print_json(&json!({ "tail": tail, "mean": mean, "std": std }))
}

fn gap(mdp: &Path, gammas: &[f64]) -> Result<()> {
    let mdp = TabularMdp::load(mdp)?;
    let rows = gap_report(&mdp, gammas)?;
    let mut w = io::stdout().lock();
    writeln!(w, "gamma,policy_id,policy,policy_gain,optimal_gain,gap")?;
    for r in rows {
        let policy: Vec<String> = r.policy.iter().map(|a| a.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.gamma,
            r.policy_id,
            policy.join(" "),
            r.policy_gain,
            r.optimal_gain,
            r.gap
        )?;
    }
    Ok(())
}

fn export(spec: &EnvSpec, out: &Path, cap: usize) -> Result<()> {
    let mdp = spec.build()?.to_tabular(cap)?;
    mdp.save(out)?;
    eprintln!("{} states, {} actions", mdp.num_states(), mdp.num_actions());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve {
            mdp,
            criterion,
            gamma,
            tol,
            ref_state,
        } => solve(&mdp, criterion, gamma, tol, ref_state),
        Command::Train {
            agent,
            env,
            config,
            out,
            seed,
            steps,
            eval_every,
            save_checkpoint,
            load_checkpoint,
        } => train(
            agent,
            &env,
            config.as_deref(),
            &out,
            seed,
            steps,
            eval_every,
            save_checkpoint.as_deref(),
            load_checkpoint.as_deref(),
        ),
        Command::Run { config, out } => run(&config, out),
        Command::Aggregate { dir, out } => aggregate(&dir, out.as_deref()),
        Command::Summarize { csv, tail } => summarize(&csv, tail),
        Command::Gap { mdp, gammas } => gap(&mdp, &gammas),
        Command::Export {
            env,
            out,
            state_cap,
        } => export(&env, &out, state_cap),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
