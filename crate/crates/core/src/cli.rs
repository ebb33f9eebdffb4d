//! Command-line driver. Every command is a function of the config file and
//! the seed; rerunning one rewrites byte-identical files (except the
//! appended results CSV).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{
    append_results, consensus_states, evaluate_joint, extrapolation_error, value_consensus,
};
use crate::config::{Learner, RunConfig};
use crate::dataset::{collect, read_jsonl, write_jsonl, AgentDataset};
use crate::empirical::{build_model, EmpiricalModel};
use crate::error::{Error, Result};
use crate::learner::{fit_rescale, greedy_policy, run_value_iteration, run_weighted_td, RescaleRewards};
use crate::qtable::QTable;
use crate::tables;
use crate::transforms::{TransformMode, TransformSpec};
use crate::verify::Suite;

#[derive(Debug, Parser)]
#[command(name = "offdec", version, about = "Offline decentralized multi-agent Q-learning laboratory")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the behavior policy and write one dataset file per agent.
    Collect,
    /// Learn one Q-table per agent from its dataset.
    Train,
    /// Execute the agents' greedy policies jointly and append metrics.
    Eval,
    /// Print the analytic matrix-game tables with a check per cell.
    ReproduceTables {
        /// Clip the value deviation at this epsilon in every table.
        #[arg(long, value_name = "EPS")]
        clip_epsilon: Option<f64>,
    },
    /// Run a property suite and print a JSON summary.
    Verify {
        /// contraction | shared-greedy | td-equivalence | affine-invariance | dg-improvement
        suite: Suite,
    },
    /// Show P_B, lambda_tn, lambda_vd and the modified probability of every
    /// visited successor (matrix game when no config is given).
    Inspect {
        #[arg(long)]
        agent: Option<usize>,
        #[arg(long)]
        mode: Option<TransformMode>,
    },
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A check reported failure (tables or a verification suite).
    Failed,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::NotConverged { .. }
        | Error::Diverged { .. }
        | Error::Degenerate(_)
        | Error::Alignment(_) => EXIT_FAILED,
        _ => EXIT_VALIDATION,
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Status> {
    match &cli.command {
        Command::Collect => cmd_collect(&load(cli)?, out),
        Command::Train => cmd_train(&load(cli)?, out),
        Command::Eval => cmd_eval(&load(cli)?, out),
        Command::ReproduceTables { clip_epsilon } => {
            cmd_reproduce_tables(*clip_epsilon, cli.out.as_deref(), out)
        }
        Command::Verify { suite } => {
            let seed = match (&cli.seed, &cli.config) {
                (Some(s), _) => *s,
                (None, Some(path)) => RunConfig::load(path)?.seed.unwrap_or(0),
                (None, None) => 0,
            };
            cmd_verify(*suite, seed, cli.out.as_deref(), out)
        }
        Command::Inspect { agent, mode } => {
            let cfg = match &cli.config {
                Some(path) => Some(RunConfig::load(path)?.resolve(cli.seed, cli.out.clone())?),
                None => None,
            };
            cmd_inspect(cfg.as_ref(), *agent, *mode, out)
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("this command needs --config PATH"))?;
    RunConfig::load(path)?.resolve(cli.seed, cli.out.clone())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

pub fn dataset_path(dir: &Path, agent: usize) -> PathBuf {
    dir.join(format!("agent{agent}.jsonl"))
}

pub fn qtable_path(dir: &Path, agent: usize) -> PathBuf {
    dir.join(format!("q_agent{agent}.csv"))
}

pub fn cmd_collect(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let env = cfg.env()?;
    let behavior = cfg.behavior.build(&env)?;
    let data = collect(&env, &behavior, cfg.dataset.episodes, cfg.seed())?;
    let dir = cfg.dataset_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for d in &data {
        let path = dataset_path(&dir, d.agent_id);
        write_jsonl(d, &path)?;
        say(out, format!("wrote {} ({} records)", path.display(), d.len()))?;
    }
    Ok(Status::Ok)
}

/// Agent `i`'s dataset and empirical model, rescaled as configured.
fn load_agent(cfg: &RunConfig, agent: usize) -> Result<(AgentDataset, EmpiricalModel)> {
    let data = read_jsonl(&dataset_path(&cfg.dataset_dir(), agent))?;
    data.validate()?;
    let model = build_model(&data, data.meta.n_states, data.meta.n_actions)?;
    match cfg.train.rescale {
        None => Ok((data, model)),
        Some([lo, hi]) => {
            let map = fit_rescale(&model, lo, hi)?;
            Ok((data.map_reward(|r| map.apply(r)), model.map_reward(|r| map.apply(r))))
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let env = cfg.env()?;
    let learn = cfg.learn_config();
    let dir = cfg.output_dir();
    let mut log = String::from("agent,iteration,value\n");
    for agent in 0..env.n_agents() {
        let (data, model) = load_agent(cfg, agent)?;
        if model.n_states() != env.n_states() || model.n_actions() != env.n_actions(agent) {
            return Err(Error::Schema {
                expected: format!("{} states, {} actions", env.n_states(), env.n_actions(agent)),
                found: format!("{} states, {} actions", model.n_states(), model.n_actions()),
            });
        }
        let init = QTable::filled(&model, learn.init);
        let (q, track) = match cfg.train.learner {
            Learner::Vi => {
                let t = run_value_iteration(&model, &learn, init)?;
                let track: Vec<(usize, f64)> =
                    t.residuals.iter().enumerate().map(|(i, &r)| (i + 1, r)).collect();
                (t.q, track)
            }
            Learner::Td => {
                let t = run_weighted_td(&data, &model, &learn, init)?;
                (t.q, t.loss)
            }
        };
        for (i, v) in track {
            log.push_str(&format!("{agent},{i},{v:e}\n"));
        }
        let path = qtable_path(dir, agent);
        write_file(&path, &q.to_csv())?;
        say(out, format!("wrote {}", path.display()))?;
    }
    let path = dir.join("train_log.csv");
    write_file(&path, &log)?;
    say(out, format!("wrote {}", path.display()))?;
    Ok(Status::Ok)
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let env = cfg.env()?;
    let dir = cfg.output_dir();
    let mut qtables = Vec::new();
    for agent in 0..env.n_agents() {
        let path = qtable_path(dir, agent);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        qtables.push(QTable::from_csv(&text, env.n_states(), env.n_actions(agent))?);
    }
    let policies: Vec<_> = qtables.iter().map(greedy_policy).collect();
    let seed = cfg.seed();
    let mut report = evaluate_joint(&env, &policies, cfg.eval.episodes, seed)?;
    if qtables.len() >= 2 {
        let states = consensus_states(&qtables, cfg.eval.consensus_states, seed);
        if !states.is_empty() {
            report
                .metrics
                .insert("value_consensus".into(), value_consensus(&qtables, &states)?);
        }
    }
    // Q in rescaled units is not comparable with true returns.
    if cfg.eval.extrapolation_episodes > 0 && cfg.train.rescale.is_none() {
        let err = extrapolation_error(
            &env,
            &policies,
            &qtables,
            cfg.eval.extrapolation_episodes,
            seed,
            cfg.learn.gamma,
        )?;
        report.metrics.insert("extrapolation_error".into(), err);
    }
    let run_id = cfg.run_id(&env);
    let path = cfg.results_path();
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    append_results(&path, &run_id, &report)?;
    for row in report.csv_rows(&run_id) {
        say(out, row)?;
    }
    Ok(Status::Ok)
}

pub fn cmd_reproduce_tables(
    clip: Option<f64>,
    save_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Status> {
    let (text, failures) = tables::render(&tables::reproduce(clip)?);
    say(out, text.trim_end())?;
    if let Some(dir) = save_dir {
        write_file(&dir.join("tables.txt"), &text)?;
    }
    Ok(if failures == 0 { Status::Ok } else { Status::Failed })
}

pub fn cmd_verify(suite: Suite, seed: u64, save_dir: Option<&Path>, out: &mut dyn Write) -> Result<Status> {
    let summary = suite.run(seed)?;
    let json = summary.to_json();
    say(out, &json)?;
    if let Some(dir) = save_dir {
        write_file(&dir.join(format!("verify-{}.json", suite.name())), &json)?;
    }
    Ok(if summary.passed { Status::Ok } else { Status::Failed })
}

pub fn cmd_inspect(
    cfg: Option<&RunConfig>,
    agent: Option<usize>,
    mode: Option<TransformMode>,
    out: &mut dyn Write,
) -> Result<Status> {
    let mut spec = cfg.map_or_else(|| TransformSpec::new(TransformMode::VdTn), |c| c.transform);
    if let Some(m) = mode {
        spec.mode = m;
    }
    let (models, learn) = match cfg {
        None => (
            tables::matrix_models()?,
            crate::learner::LearnConfig::default().with_transform(spec),
        ),
        Some(c) => {
            let env = c.env()?;
            let models = (0..env.n_agents())
                .map(|i| load_agent(c, i).map(|(_, m)| m))
                .collect::<Result<Vec<_>>>()?;
            (models, c.learn_config().with_transform(spec))
        }
    };
    if let Some(a) = agent.filter(|&a| a >= models.len()) {
        return Err(Error::invalid(format!("agent {a} out of range (have {})", models.len())));
    }
    let mut first = true;
    for (i, model) in models.iter().enumerate().filter(|(i, _)| agent.is_none_or(|a| a == *i)) {
        let q = run_value_iteration(model, &learn, QTable::filled(model, learn.init))?.q;
        let text = tables::inspect(i, model, &q, learn.gamma, &spec)?;
        // one header for all agents
        let body = if first { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
        first = false;
        write!(out, "{body}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["offdec", "verify", "proposition1", "--seed", "4"]).unwrap();
        assert_eq!(cli.seed, Some(4));
        assert!(matches!(cli.command, Command::Verify { suite: Suite::SharedGreedy }));
    }

    #[test]
    fn unknown_suite_is_a_usage_error() {
        let err = Cli::try_parse_from(["offdec", "verify", "nope"]).unwrap_err();
        assert!(err.to_string().contains("unknown suite"), "{err}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::NotConverged { sweeps: 1, residual: 1.0 }), EXIT_FAILED);
    }

    #[test]
    fn inspect_defaults_to_matrix_game() {
        let mut buf = Vec::new();
        cmd_inspect(None, Some(1), None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("agent,state,action,next,p_b,"));
        assert!(text.lines().skip(1).all(|l| l.starts_with("1,0,")));
    }
}
