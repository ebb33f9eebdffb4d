//! Joint execution and the diagnostic metrics: value consensus,
//! extrapolation error and the shared-greedy-transition harness.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::empirical::EmpiricalModel;
use crate::env::{dirichlet_row, env_step, sample_start, Categorical, EnvSpec};
use crate::error::{Error, Result};
use crate::learner::{modified_value_iteration, GreedyPolicy, LearnConfig};
use crate::qtable::QTable;

/// Episode cap for environments with neither horizon nor reachable terminal.
const EPISODE_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean undiscounted episode return.
    pub mean_return: f64,
    /// Population standard deviation of the undiscounted return.
    pub std_return: f64,
    pub n_episodes: usize,
    /// Extra metrics such as `value_consensus` and `extrapolation_error`.
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    /// `run_id,metric,value` lines, metrics in name order.
    pub fn csv_rows(&self, run_id: &str) -> Vec<String> {
        let mut rows = vec![
            format!("{run_id},mean_return,{}", self.mean_return),
            format!("{run_id},std_return,{}", self.std_return),
            format!("{run_id},n_episodes,{}", self.n_episodes),
        ];
        rows.extend(self.metrics.iter().map(|(k, v)| format!("{run_id},{k},{v}")));
        rows
    }
}

pub const RESULTS_HEADER: &str = "run_id,metric,value";

/// Appends the report to a results CSV, writing the header for a new file.
pub fn append_results(path: &Path, run_id: &str, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    for row in report.csv_rows(run_id) {
        text.push_str(&row);
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_policies(env: &EnvSpec, policies: &[GreedyPolicy]) -> Result<()> {
    if policies.len() != env.n_agents() {
        return Err(Error::invalid(format!(
            "{} policies for {} agents",
            policies.len(),
            env.n_agents()
        )));
    }
    for (i, p) in policies.iter().enumerate() {
        if p.actions.len() != env.n_states() {
            return Err(Error::invalid(format!("policy of agent {i} has the wrong state count")));
        }
        if let Some(&a) = p.actions.iter().find(|&&a| a >= env.n_actions(i)) {
            return Err(Error::invalid(format!("policy of agent {i} uses action {a}")));
        }
    }
    Ok(())
}

/// Undiscounted and discounted return of one joint episode from `start`.
fn rollout(
    env: &EnvSpec,
    policies: &[GreedyPolicy],
    start: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut state = start;
    let (mut total, mut discounted, mut scale) = (0.0, 0.0, 1.0);
    let mut joint = vec![0; policies.len()];
    if env.is_terminal(state) {
        return Ok((0.0, 0.0));
    }
    for t in 0..env.horizon().unwrap_or(EPISODE_CAP) {
        for (slot, p) in joint.iter_mut().zip(policies) {
            *slot = p.action(state);
        }
        let step = env_step(env, state, &joint, t, rng)?;
        total += step.reward;
        discounted += scale * step.reward;
        scale *= gamma;
        if step.done {
            break;
        }
        state = step.next_state;
    }
    Ok((total, discounted))
}

/// Runs `n_episodes` episodes with every agent following its own policy.
/// Episode `k` draws from its own stream of the seeded generator.
pub fn evaluate_joint(
    env: &EnvSpec,
    policies: &[GreedyPolicy],
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be positive"));
    }
    check_policies(env, policies)?;
    let mut returns = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let mut rng = episode_rng(seed, k as u64);
        let start = sample_start(env, &mut rng);
        returns.push(rollout(env, policies, start, 1.0, &mut rng)?.0);
    }
    let n = n_episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        mean_return: mean,
        std_return: var.sqrt(),
        n_episodes,
        metrics: BTreeMap::new(),
    })
}

/// Mean over `states` of `max_i V_i(s) - min_i V_i(s)`.
pub fn value_consensus(qtables: &[QTable], states: &[usize]) -> Result<f64> {
    if qtables.len() < 2 || states.is_empty() {
        return Err(Error::invalid("value consensus needs >= 2 q-tables and >= 1 state"));
    }
    let total: f64 = states.iter().map(|&s| spread_at(qtables, s)).sum();
    Ok(total / states.len() as f64)
}

fn spread_at(qtables: &[QTable], s: usize) -> f64 {
    let (lo, hi) = qtables
        .iter()
        .map(|q| q.value_or_zero(s))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Largest per-state spread of the agents' state values.
pub fn max_value_spread(qtables: &[QTable]) -> f64 {
    let n = qtables.first().map_or(0, QTable::n_states);
    (0..n).map(|s| spread_at(qtables, s)).fold(0.0, f64::max)
}

pub const DEFAULT_CONSENSUS_STATES: usize = 100;

/// Uniform subset (without replacement) of the states where at least one
/// agent has an in-support action; all of them if there are at most `max`.
pub fn consensus_states(qtables: &[QTable], max: usize, seed: u64) -> Vec<usize> {
    let n = qtables.first().map_or(0, QTable::n_states);
    let pool: Vec<usize> = (0..n)
        .filter(|&s| qtables.iter().any(|q| q.greedy_action(s).is_some()))
        .collect();
    if pool.len() <= max {
        return pool;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), max)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// `|mean_i Q_i(s0, pi_i(s0)) - G(s0)|` weighted by the start distribution,
/// with `G` the mean discounted Monte Carlo return of the joint policy.
pub fn extrapolation_error(
    env: &EnvSpec,
    policies: &[GreedyPolicy],
    qtables: &[QTable],
    n_episodes: usize,
    seed: u64,
    gamma: f64,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be positive"));
    }
    if qtables.len() != policies.len() {
        return Err(Error::invalid("need one q-table per policy"));
    }
    check_policies(env, policies)?;
    let mut error = 0.0;
    for (k, &(s0, p0)) in env.initial().iter().enumerate() {
        let estimate = qtables
            .iter()
            .zip(policies)
            .map(|(q, p)| q.get(s0, p.action(s0)))
            .sum::<f64>()
            / qtables.len() as f64;
        let mut g = 0.0;
        for ep in 0..n_episodes {
            let mut rng = episode_rng(seed, (k * n_episodes + ep) as u64);
            g += rollout(env, policies, s0, gamma, &mut rng)?.1;
        }
        error += p0 * (estimate - g / n_episodes as f64).abs();
    }
    Ok(error)
}

/// One-sided sign test: `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut coef = 1.0_f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += coef;
        }
        coef = coef * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Every agent's greedy action carries the same next-state distribution.
    Matched,
    /// Each agent's greedy action carries its own distribution.
    Mismatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedGreedyOutcome {
    pub spread: f64,
    pub rounds: usize,
    pub qtables: Vec<QTable>,
}

const MAX_ALIGNMENT_ROUNDS: usize = 100;

/// Builds per-agent models over the successor structure of an episodic
/// template in which each agent has a designated action per state, then
/// forces the designated actions to be greedy: any action that beats the
/// designated one has its row replaced by a point mass on its agent's
/// lowest-valued successor, and learning is rerun until nothing changes.
/// Returns the largest cross-agent spread of the learned state values.
pub fn shared_greedy_check(
    template: &EnvSpec,
    n_agents: usize,
    seed: u64,
    construction: Construction,
    config: &LearnConfig,
) -> Result<SharedGreedyOutcome> {
    if n_agents == 0 {
        return Err(Error::invalid("need at least one agent"));
    }
    check_episodic(template)?;
    let n = template.n_states();
    let allowed: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            let mut next: Vec<usize> = if template.is_terminal(s) {
                Vec::new()
            } else {
                (0..template.n_joint())
                    .flat_map(|j| template.row(s, j).iter().map(|&(t, _)| t))
                    .collect()
            };
            next.sort_unstable();
            next.dedup();
            next
        })
        .collect();
    let n_actions: Vec<usize> = (0..n_agents)
        .map(|i| template.n_actions(i % template.n_agents()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut designated = vec![vec![0; n]; n_agents];
    let mut rows: Vec<Vec<Option<Categorical>>> =
        n_actions.iter().map(|&k| vec![None; n * k]).collect();
    for s in (0..n).filter(|&s| !allowed[s].is_empty()) {
        let shared = dirichlet_row(&allowed[s], &mut rng);
        for i in 0..n_agents {
            let k = n_actions[i];
            let d = rng.random_range(0..k);
            designated[i][s] = d;
            for a in 0..k {
                rows[i][s * k + a] = Some(match construction {
                    Construction::Matched if a == d => shared.clone(),
                    _ => dirichlet_row(&allowed[s], &mut rng),
                });
            }
        }
    }
    let rewards: Vec<Option<f64>> = template.rewards().iter().map(|&r| Some(r)).collect();

    for round in 1..=MAX_ALIGNMENT_ROUNDS {
        let mut changed = false;
        let mut qtables = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let k = n_actions[i];
            let model = EmpiricalModel::from_rows(n, k, rows[i].clone(), rewards.clone())?;
            let q = modified_value_iteration(&model, config)?;
            for s in (0..n).filter(|&s| !allowed[s].is_empty()) {
                let d = designated[i][s];
                let best = q.state_value(s).expect("decision state");
                if q.get(s, d) >= best {
                    continue;
                }
                let g = q.greedy_action(s).expect("decision state");
                let u = |t: usize| template.reward(t) + config.gamma * q.value_or_zero(t);
                let worst = allowed[s]
                    .iter()
                    .copied()
                    .min_by(|&x, &y| u(x).total_cmp(&u(y)))
                    .expect("nonempty");
                rows[i][s * k + g] = Some(vec![(worst, 1.0)]);
                changed = true;
            }
            qtables.push(q);
        }
        if !changed {
            return Ok(SharedGreedyOutcome {
                spread: max_value_spread(&qtables),
                rounds: round,
                qtables,
            });
        }
    }
    Err(Error::Alignment(format!(
        "designated actions still not greedy after {MAX_ALIGNMENT_ROUNDS} rounds"
    )))
}

/// Every trajectory must reach a terminal: the transition graph over
/// nonterminal states has to be acyclic.
fn check_episodic(env: &EnvSpec) -> Result<()> {
    let n = env.n_states();
    let mut indegree = vec![0usize; n];
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            let mut next: Vec<usize> = if env.is_terminal(s) {
                Vec::new()
            } else {
                (0..env.n_joint())
                    .flat_map(|j| env.row(s, j).iter().map(|&(t, _)| t))
                    .filter(|&t| !env.is_terminal(t))
                    .collect()
            };
            next.sort_unstable();
            next.dedup();
            next
        })
        .collect();
    for next in &succ {
        for &t in next {
            indegree[t] += 1;
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&s| indegree[s] == 0).collect();
    let mut seen = 0;
    while let Some(s) = queue.pop() {
        seen += 1;
        for &t in &succ[s] {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                queue.push(t);
            }
        }
    }
    if seen != n {
        return Err(Error::invalid(format!("template `{}` is not episodic", env.name())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::exact_model_from_env;
    use crate::env::{episodic_random_mdp, matrix_game, random_mdp, JointPolicy};
    use crate::learner::greedy_policy;
    use crate::transforms::{TransformMode, TransformSpec};

    fn mg_tables(mode: TransformMode) -> (EnvSpec, Vec<QTable>) {
        let env = matrix_game();
        let beh = JointPolicy::state_independent(&env, &[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        let cfg = LearnConfig::default().with_transform(TransformSpec::new(mode));
        let tables = (0..2)
            .map(|i| {
                let m = exact_model_from_env(&env, &beh, i).unwrap();
                modified_value_iteration(&m, &cfg).unwrap()
            })
            .collect();
        (env, tables)
    }

    fn policies(tables: &[QTable]) -> Vec<GreedyPolicy> {
        tables.iter().map(greedy_policy).collect()
    }

    #[test]
    fn joint_returns_of_greedy_policies() {
        let (env, t) = mg_tables(TransformMode::VdTn);
        let r = evaluate_joint(&env, &policies(&t), 100, 1).unwrap();
        assert_eq!(r.mean_return, 6.0);
        assert_eq!(r.std_return, 0.0);
        let (env, t) = mg_tables(TransformMode::None);
        assert_eq!(evaluate_joint(&env, &policies(&t), 100, 1).unwrap().mean_return, 5.0);
        assert!(evaluate_joint(&env, &policies(&t), 0, 1).is_err());
    }

    #[test]
    fn evaluation_is_reproducible() {
        let env = random_mdp(5, 2, 2, 1.0, 2.0, 3).unwrap().with_horizon(Some(10)).unwrap();
        let pol = vec![GreedyPolicy::from_actions(vec![0, 1, 0, 1, 0]); 2];
        let a = evaluate_joint(&env, &pol, 50, 9).unwrap();
        assert_eq!(a, evaluate_joint(&env, &pol, 50, 9).unwrap());
        assert!(a.std_return > 0.0);
        assert_ne!(a, evaluate_joint(&env, &pol, 50, 10).unwrap());
    }

    #[test]
    fn consensus_metric() {
        let (_, t) = mg_tables(TransformMode::VdTn);
        assert_eq!(value_consensus(&[t[0].clone(), t[0].clone()], &[0]).unwrap(), 0.0);
        let vdtn = value_consensus(&t, &[0]).unwrap();
        let (_, t_vd) = mg_tables(TransformMode::Vd);
        let vd = value_consensus(&t_vd, &[0]).unwrap();
        assert!(vdtn < vd, "{vdtn} vs {vd}");
        assert!((vd - (5.0 - 20.2 / 4.2)).abs() < 1e-12);
        assert!(value_consensus(&t[..1], &[0]).is_err());
        assert_eq!(consensus_states(&t, 100, 0), vec![0]);
    }

    #[test]
    fn consensus_two_values() {
        let m = EmpiricalModel::from_rows(2, 1, vec![Some(vec![(1, 1.0)]), None], vec![None, Some(1.0)])
            .unwrap();
        let mut a = QTable::zeros(&m);
        let mut b = QTable::zeros(&m);
        a.set(0, 0, 3.0);
        b.set(0, 0, 5.0);
        assert_eq!(value_consensus(&[a.clone(), b.clone()], &[0]).unwrap(), 2.0);
        assert_eq!(value_consensus(&[b, a], &[0]).unwrap(), 2.0);
    }

    #[test]
    fn consensus_subset_is_sorted_and_bounded() {
        let env = random_mdp(150, 2, 2, 1.0, 2.0, 1).unwrap();
        let beh = JointPolicy::uniform(&env);
        let q: Vec<QTable> = (0..2)
            .map(|i| QTable::zeros(&exact_model_from_env(&env, &beh, i).unwrap()))
            .collect();
        let s = consensus_states(&q, 100, 4);
        assert_eq!(s.len(), 100);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, consensus_states(&q, 100, 4));
    }

    #[test]
    fn extrapolation_error_of_combined_tables() {
        let (env, t) = mg_tables(TransformMode::VdTn);
        let e = extrapolation_error(&env, &policies(&t), &t, 10, 0, 0.9).unwrap();
        assert!((e - (6.0 - 37.0 / 7.0)).abs() < 1e-12);
        assert!((e - 0.71).abs() < 0.005);
    }

    #[test]
    fn extrapolation_error_of_oracle_is_zero() {
        let env = matrix_game();
        let m = exact_model_from_env(&env, &JointPolicy::uniform(&env), 0).unwrap();
        let mut q = QTable::zeros(&m);
        q.set(0, 0, 5.0);
        q.set(0, 1, 1.0);
        let mut q2 = QTable::zeros(&m);
        q2.set(0, 0, 1.0);
        q2.set(0, 1, 5.0);
        let pol = vec![greedy_policy(&q), greedy_policy(&q2)];
        let e = extrapolation_error(&env, &pol, &[q, q2], 5, 0, 0.9).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn sign_test() {
        assert!((sign_test_p_value(15, 5) - 0.020694).abs() < 1e-6);
        assert!((sign_test_p_value(14, 6) - 0.057659).abs() < 1e-6);
        assert_eq!(sign_test_p_value(0, 3), 1.0);
        assert_eq!(sign_test_p_value(3, 0), 0.125);
    }

    #[test]
    fn shared_greedy_transitions_agree() {
        let cfg = LearnConfig::default();
        for seed in 0..10 {
            let env = episodic_random_mdp(6, 2, 2, 1.0, 5.0, seed).unwrap();
            let out = shared_greedy_check(&env, 2, seed, Construction::Matched, &cfg).unwrap();
            assert!(out.spread < 1e-8, "seed {seed}: {}", out.spread);
            let neg = shared_greedy_check(&env, 2, seed, Construction::Mismatched, &cfg).unwrap();
            assert!(neg.spread > 1e-4, "seed {seed}: {}", neg.spread);
        }
    }

    #[test]
    fn shared_greedy_rejects_cycles() {
        let env = random_mdp(4, 2, 2, 1.0, 2.0, 0).unwrap();
        assert!(shared_greedy_check(&env, 2, 0, Construction::Matched, &LearnConfig::default()).is_err());
    }
}
