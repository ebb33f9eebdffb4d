//! Each agent's visible MDP, estimated from its own dataset.
//!
//! Rows are kept as non-negative weights per observed successor (visit
//! counts for data-built models, probability mass for analytic ones). A pair
//! `(s, a)` is *visited* iff it has a row; unvisited pairs are excluded from
//! every maximization downstream.

use std::collections::BTreeMap;

use crate::dataset::AgentDataset;
use crate::env::{Categorical, EnvSpec, JointPolicy};
use crate::error::{Error, Result};
use crate::mdp_text::MdpDocument;

/// Reward consistency tolerance for state-attached rewards.
pub const REWARD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportRow {
    /// `(next_state, weight)`, strictly increasing in `next_state`, weights > 0.
    weights: Vec<(usize, f64)>,
    total: f64,
}

impl SupportRow {
    fn from_weights(weights: Vec<(usize, f64)>) -> Result<Self> {
        let weights: Vec<_> = weights.into_iter().filter(|&(_, w)| w > 0.0).collect();
        if weights.is_empty() {
            return Err(Error::invalid("support row has no positive weight"));
        }
        if weights.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("support row not sorted by state"));
        }
        if weights.iter().any(|&(_, w)| !w.is_finite()) {
            return Err(Error::invalid("support row has non-finite weight"));
        }
        let total = weights.iter().map(|&(_, w)| w).sum();
        Ok(Self { weights, total })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn weights(&self) -> &[(usize, f64)] {
        &self.weights
    }

    pub fn states(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().map(|&(s, _)| s)
    }

    /// `(next_state, probability)` over the support.
    pub fn probabilities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().map(move |&(s, w)| (s, w / self.total))
    }

    pub fn prob(&self, next: usize) -> f64 {
        self.weights
            .binary_search_by_key(&next, |&(s, _)| s)
            .map_or(0.0, |i| self.weights[i].1 / self.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    n_states: usize,
    n_actions: usize,
    /// Indexed by `state * n_actions + action`.
    rows: Vec<Option<SupportRow>>,
    reward_of_state: Vec<Option<f64>>,
}

impl EmpiricalModel {
    /// Builds a model from explicit rows (probabilities or unnormalized
    /// weights). `rows[s * n_actions + a] = None` marks an unvisited pair.
    pub fn from_rows(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Option<Categorical>>,
        reward_of_state: Vec<Option<f64>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("model needs at least one state and action"));
        }
        if rows.len() != n_states * n_actions || reward_of_state.len() != n_states {
            return Err(Error::invalid("row/reward tables have the wrong size"));
        }
        let rows = rows
            .into_iter()
            .map(|r| r.map(SupportRow::from_weights).transpose())
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            n_states,
            n_actions,
            rows,
            reward_of_state,
        };
        for row in model.rows.iter().flatten() {
            for s in row.states() {
                if s >= n_states {
                    return Err(Error::invalid(format!("successor {s} out of range")));
                }
                if model.reward_of_state[s].is_none() {
                    return Err(Error::invalid(format!("successor {s} has no reward")));
                }
            }
        }
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_visited(&self, state: usize, action: usize) -> bool {
        self.rows[state * self.n_actions + action].is_some()
    }

    /// Visited actions at `state`, in increasing order.
    pub fn actions(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_actions).filter(move |&a| self.is_visited(state, a))
    }

    /// A state with no visited action. Its successor value is taken as zero.
    pub fn is_terminal(&self, state: usize) -> bool {
        self.actions(state).next().is_none()
    }

    pub fn row(&self, state: usize, action: usize) -> Result<&SupportRow> {
        self.rows[state * self.n_actions + action]
            .as_ref()
            .ok_or(Error::NoData { state, action })
    }

    /// `P_B(next | state, action)`; zero outside the support, an error when
    /// the pair was never visited.
    pub fn transition_prob(&self, state: usize, action: usize, next: usize) -> Result<f64> {
        Ok(self.row(state, action)?.prob(next))
    }

    pub fn support(&self, state: usize, action: usize) -> Result<Vec<usize>> {
        Ok(self.row(state, action)?.states().collect())
    }

    pub fn visit_count(&self, state: usize, action: usize) -> f64 {
        self.rows[state * self.n_actions + action]
            .as_ref()
            .map_or(0.0, SupportRow::total)
    }

    pub fn reward(&self, state: usize) -> Option<f64> {
        self.reward_of_state[state]
    }

    pub fn rewards(&self) -> &[Option<f64>] {
        &self.reward_of_state
    }

    /// Observed reward range over states with a known reward.
    pub fn reward_range(&self) -> Option<(f64, f64)> {
        self.reward_of_state.iter().flatten().fold(None, |acc, &r| {
            Some(match acc {
                None => (r, r),
                Some((lo, hi)) => (f64::min(lo, r), f64::max(hi, r)),
            })
        })
    }

    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            reward_of_state: self.reward_of_state.iter().map(|r| r.map(&f)).collect(),
            ..self.clone()
        }
    }

    pub fn visited_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_states)
            .flat_map(move |s| (0..self.n_actions).map(move |a| (s, a)))
            .filter(|&(s, a)| self.is_visited(s, a))
    }

    /// States that have at least one visited action.
    pub fn decision_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| !self.is_terminal(s))
    }

    /// Dump in the plain-text MDP format (one agent, probabilities).
    pub fn to_document(&self, name: &str) -> MdpDocument {
        let rows = self
            .visited_pairs()
            .map(|(s, a)| {
                let row = self.rows[s * self.n_actions + a].as_ref().expect("visited");
                (s, a, row.probabilities().collect())
            })
            .collect();
        MdpDocument {
            name: name.to_string(),
            actions_per_agent: vec![self.n_actions],
            n_states: self.n_states,
            horizon: None,
            initial: Vec::new(),
            rewards: self
                .reward_of_state
                .iter()
                .enumerate()
                .filter_map(|(s, r)| r.map(|r| (s, r)))
                .collect(),
            terminals: (0..self.n_states).filter(|&s| self.is_terminal(s)).collect(),
            rows,
        }
    }
}

pub fn build_model(
    dataset: &AgentDataset,
    n_states: usize,
    n_actions: usize,
) -> Result<EmpiricalModel> {
    build_model_with_tolerance(dataset, n_states, n_actions, REWARD_TOLERANCE)
}

/// Like [`build_model`] with a caller-chosen reward consistency tolerance.
pub fn build_model_with_tolerance(
    dataset: &AgentDataset,
    n_states: usize,
    n_actions: usize,
    reward_tolerance: f64,
) -> Result<EmpiricalModel> {
    let mut counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_states * n_actions];
    // (first observation, running sum, count)
    let mut rewards: Vec<Option<(f64, f64, f64)>> = vec![None; n_states];
    for (i, r) in dataset.records.iter().enumerate() {
        if r.state >= n_states || r.next_state >= n_states || r.action >= n_actions {
            return Err(Error::Parse {
                line: i + 2,
                message: format!(
                    "record ({}, {}, {}) outside {n_states} states / {n_actions} actions",
                    r.state, r.action, r.next_state
                ),
            });
        }
        *counts[r.state * n_actions + r.action]
            .entry(r.next_state)
            .or_insert(0.0) += 1.0;
        match &mut rewards[r.next_state] {
            slot @ None => *slot = Some((r.reward, r.reward, 1.0)),
            Some((first, sum, n)) => {
                if (r.reward - *first).abs() > reward_tolerance {
                    return Err(Error::InconsistentReward {
                        state: r.next_state,
                        expected: *first,
                        observed: r.reward,
                        tolerance: reward_tolerance,
                    });
                }
                *sum += r.reward;
                *n += 1.0;
            }
        }
    }
    let rows = counts
        .into_iter()
        .map(|m| (!m.is_empty()).then(|| m.into_iter().collect()))
        .collect();
    let rewards = rewards
        .into_iter()
        .map(|r| r.map(|(_, sum, n)| sum / n))
        .collect();
    EmpiricalModel::from_rows(n_states, n_actions, rows, rewards)
}

/// The infinite-data model of agent `agent`: the environment kernel with the
/// other agents' behavior marginalized out,
/// `P_B(s'|s,a_i) = sum_{a_-i} P_env(s'|s,a_i,a_-i) * pi_B,-i(a_-i|s)`.
/// Pairs the agent's own behavior never takes are unvisited.
pub fn exact_model_from_env(
    env: &EnvSpec,
    behavior: &JointPolicy,
    agent: usize,
) -> Result<EmpiricalModel> {
    if agent >= env.n_agents() {
        return Err(Error::invalid(format!("agent {agent} out of range")));
    }
    behavior.check_covers(env)?;
    let n_states = env.n_states();
    let n_actions = env.n_actions(agent);
    let mut rows = vec![None; n_states * n_actions];
    for s in (0..n_states).filter(|&s| !env.is_terminal(s)) {
        let mut mass: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_actions];
        for j in 0..env.n_joint() {
            let joint = env.joint_actions(j);
            let others: f64 = joint
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != agent)
                .map(|(k, &a)| behavior.prob(k, s, a))
                .product();
            if others == 0.0 {
                continue;
            }
            let entry = &mut mass[joint[agent]];
            for &(next, p) in env.row(s, j) {
                *entry.entry(next).or_insert(0.0) += p * others;
            }
        }
        for (a, m) in mass.into_iter().enumerate() {
            if behavior.prob(agent, s, a) > 0.0 {
                rows[s * n_actions + a] = Some(m.into_iter().filter(|&(_, p)| p > 0.0).collect());
            }
        }
    }
    let rewards = env.rewards().iter().map(|&r| Some(r)).collect();
    EmpiricalModel::from_rows(n_states, n_actions, rows, rewards)
}
