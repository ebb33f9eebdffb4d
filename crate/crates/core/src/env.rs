//! Finite multi-agent MDPs and the environments used for verification.
//!
//! Rewards are attached to states: an agent that enters `s'` receives
//! `R(s')`. Joint actions are flattened in mixed radix with agent 0 as the
//! most significant digit, so for two agents with two actions each the joint
//! index of `(a1, a2)` is `2 * a1 + a2`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Sparse categorical distribution over state ids, sorted by id.
pub type Categorical = Vec<(usize, f64)>;

/// Tolerance for a probability row to count as normalized.
pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    name: String,
    actions_per_agent: Vec<usize>,
    n_states: usize,
    /// Indexed by `state * n_joint + joint`. Terminal rows are empty.
    transitions: Vec<Categorical>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    initial: Categorical,
    horizon: Option<usize>,
}

/// Raw parts of an [`EnvSpec`], validated by [`EnvSpec::new`].
#[derive(Debug, Clone)]
pub struct EnvParts {
    pub name: String,
    pub actions_per_agent: Vec<usize>,
    pub n_states: usize,
    pub transitions: Vec<Categorical>,
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
    pub initial: Categorical,
    pub horizon: Option<usize>,
}

fn check_categorical(row: &[(usize, f64)], n_states: usize, what: &str) -> Result<()> {
    let mut sum = 0.0;
    let mut prev: Option<usize> = None;
    for &(s, p) in row {
        if s >= n_states {
            return Err(Error::invalid(format!("{what}: state {s} out of range")));
        }
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::invalid(format!("{what}: bad probability {p}")));
        }
        if prev.is_some_and(|q| q >= s) {
            return Err(Error::invalid(format!("{what}: states not strictly increasing")));
        }
        prev = Some(s);
        sum += p;
    }
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::invalid(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

impl EnvSpec {
    pub fn new(parts: EnvParts) -> Result<Self> {
        let EnvParts {
            name,
            actions_per_agent,
            n_states,
            transitions,
            reward,
            terminal,
            initial,
            horizon,
        } = parts;
        if actions_per_agent.is_empty() || actions_per_agent.contains(&0) {
            return Err(Error::invalid("every agent needs at least one action"));
        }
        if n_states == 0 {
            return Err(Error::invalid("environment has no states"));
        }
        let n_joint: usize = actions_per_agent.iter().product();
        if transitions.len() != n_states * n_joint {
            return Err(Error::invalid(format!(
                "expected {} transition rows, got {}",
                n_states * n_joint,
                transitions.len()
            )));
        }
        if reward.len() != n_states || terminal.len() != n_states {
            return Err(Error::invalid("reward/terminal tables must cover every state"));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("non-finite reward {r}")));
        }
        if horizon == Some(0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        for s in 0..n_states {
            for j in 0..n_joint {
                let row = &transitions[s * n_joint + j];
                if terminal[s] {
                    if !row.is_empty() {
                        return Err(Error::invalid(format!(
                            "terminal state {s} has outgoing transitions"
                        )));
                    }
                } else {
                    check_categorical(row, n_states, &format!("row ({s}, {j})"))?;
                }
            }
        }
        check_categorical(&initial, n_states, "initial distribution")?;
        Ok(Self {
            name,
            actions_per_agent,
            n_states,
            transitions,
            reward,
            terminal,
            initial,
            horizon,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_agents(&self) -> usize {
        self.actions_per_agent.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions_per_agent(&self) -> &[usize] {
        &self.actions_per_agent
    }

    pub fn n_actions(&self, agent: usize) -> usize {
        self.actions_per_agent[agent]
    }

    pub fn n_joint(&self) -> usize {
        self.actions_per_agent.iter().product()
    }

    pub fn reward(&self, state: usize) -> f64 {
        self.reward[state]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| self.terminal[s])
    }

    pub fn initial(&self) -> &[(usize, f64)] {
        &self.initial
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    /// Next-state distribution for `(state, joint)`; empty for terminal states.
    pub fn row(&self, state: usize, joint: usize) -> &[(usize, f64)] {
        &self.transitions[state * self.n_joint() + joint]
    }

    pub fn joint_index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.n_agents() {
            return Err(Error::invalid(format!(
                "joint action has {} components, expected {}",
                actions.len(),
                self.n_agents()
            )));
        }
        let mut j = 0;
        for (agent, (&a, &n)) in actions.iter().zip(&self.actions_per_agent).enumerate() {
            if a >= n {
                return Err(Error::invalid(format!("agent {agent}: action {a} >= {n}")));
            }
            j = j * n + a;
        }
        Ok(j)
    }

    pub fn joint_actions(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents()];
        for (slot, &n) in out.iter_mut().zip(&self.actions_per_agent).rev() {
            *slot = joint % n;
            joint /= n;
        }
        out
    }

    /// Replaces the episode length cap.
    pub fn with_horizon(mut self, horizon: Option<usize>) -> Result<Self> {
        if horizon == Some(0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Per-agent, per-state action distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    /// `agents[i][s]` is agent `i`'s distribution at state `s`.
    agents: Vec<Vec<Vec<f64>>>,
    description: String,
}

impl JointPolicy {
    pub fn new(agents: Vec<Vec<Vec<f64>>>, description: impl Into<String>) -> Result<Self> {
        for (i, per_state) in agents.iter().enumerate() {
            for (s, dist) in per_state.iter().enumerate() {
                let sum: f64 = dist.iter().sum();
                if dist.is_empty()
                    || dist.iter().any(|p| !(*p >= 0.0))
                    || (sum - 1.0).abs() > SUM_TOLERANCE
                {
                    return Err(Error::invalid(format!(
                        "agent {i}, state {s}: {dist:?} is not a distribution"
                    )));
                }
            }
        }
        Ok(Self {
            agents,
            description: description.into(),
        })
    }

    /// Every agent picks uniformly at every state.
    pub fn uniform(env: &EnvSpec) -> Self {
        let agents = env
            .actions_per_agent()
            .iter()
            .map(|&n| vec![vec![1.0 / n as f64; n]; env.n_states()])
            .collect();
        Self {
            agents,
            description: "uniform".into(),
        }
    }

    /// The same distribution at every state, one per agent.
    pub fn state_independent(env: &EnvSpec, per_agent: &[Vec<f64>]) -> Result<Self> {
        if per_agent.len() != env.n_agents() {
            return Err(Error::invalid("one distribution per agent required"));
        }
        for (i, d) in per_agent.iter().enumerate() {
            if d.len() != env.n_actions(i) {
                return Err(Error::invalid(format!(
                    "agent {i}: distribution has {} entries, expected {}",
                    d.len(),
                    env.n_actions(i)
                )));
            }
        }
        let agents = per_agent
            .iter()
            .map(|d| vec![d.clone(); env.n_states()])
            .collect();
        Self::new(agents, format!("fixed {per_agent:?}"))
    }

    /// Point-mass policies from per-agent action tables.
    pub fn deterministic(env: &EnvSpec, actions: &[Vec<usize>]) -> Result<Self> {
        if actions.len() != env.n_agents() {
            return Err(Error::invalid("one action table per agent required"));
        }
        let mut agents = Vec::with_capacity(actions.len());
        for (i, table) in actions.iter().enumerate() {
            if table.len() != env.n_states() {
                return Err(Error::invalid(format!("agent {i}: action table length")));
            }
            let n = env.n_actions(i);
            let mut per_state = Vec::with_capacity(table.len());
            for &a in table {
                if a >= n {
                    return Err(Error::invalid(format!("agent {i}: action {a} >= {n}")));
                }
                let mut d = vec![0.0; n];
                d[a] = 1.0;
                per_state.push(d);
            }
            agents.push(per_state);
        }
        Ok(Self {
            agents,
            description: "deterministic".into(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn distribution(&self, agent: usize, state: usize) -> &[f64] {
        &self.agents[agent][state]
    }

    pub fn prob(&self, agent: usize, state: usize, action: usize) -> f64 {
        self.agents[agent][state][action]
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn sample<R: Rng + ?Sized>(&self, agent: usize, state: usize, rng: &mut R) -> usize {
        sample_index(&self.agents[agent][state], rng)
    }

    pub(crate) fn check_covers(&self, env: &EnvSpec) -> Result<()> {
        if self.agents.len() != env.n_agents() {
            return Err(Error::invalid("policy agent count does not match environment"));
        }
        for (i, per_state) in self.agents.iter().enumerate() {
            if per_state.len() != env.n_states()
                || per_state.iter().any(|d| d.len() != env.n_actions(i))
            {
                return Err(Error::invalid(format!(
                    "agent {i}: policy does not cover every state/action"
                )));
            }
        }
        Ok(())
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(s, p) in row {
        acc += p;
        if u < acc {
            return s;
        }
    }
    row.iter().rev().find(|(_, p)| *p > 0.0).map_or(row[0].0, |&(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
}

/// Advances one step. `elapsed` is the number of steps already taken in the
/// current episode; the episode ends when the next state is terminal or the
/// horizon is reached.
pub fn env_step<R: Rng + ?Sized>(
    env: &EnvSpec,
    state: usize,
    joint_action: &[usize],
    elapsed: usize,
    rng: &mut R,
) -> Result<Step> {
    if state >= env.n_states() {
        return Err(Error::invalid(format!("state {state} out of range")));
    }
    if env.is_terminal(state) {
        return Err(Error::TerminalStep(state));
    }
    let j = env.joint_index(joint_action)?;
    let next_state = sample_categorical(env.row(state, j), rng);
    let done = env.is_terminal(next_state) || env.horizon().is_some_and(|h| elapsed + 1 >= h);
    Ok(Step {
        next_state,
        reward: env.reward(next_state),
        done,
    })
}

pub(crate) fn sample_start<R: Rng + ?Sized>(env: &EnvSpec, rng: &mut R) -> usize {
    sample_categorical(env.initial(), rng)
}

/// State ids of the matrix game.
pub mod matrix {
    pub const START: usize = 0;
    pub const OUTCOME_1: usize = 1;
    pub const OUTCOME_5: usize = 2;
    pub const OUTCOME_6: usize = 3;
}

/// Two-agent, two-action cooperative one-shot game with payoffs
/// `(a1,a1)=1, (a1,a2)=5, (a2,a1)=6, (a2,a2)=1`.
///
/// Both joint actions paying 1 lead to the same terminal outcome state.
pub fn matrix_game() -> EnvSpec {
    use matrix::*;
    let outcomes = [OUTCOME_1, OUTCOME_5, OUTCOME_6, OUTCOME_1];
    let mut transitions = vec![Vec::new(); 4 * 4];
    for (j, &o) in outcomes.iter().enumerate() {
        transitions[START * 4 + j] = vec![(o, 1.0)];
    }
    EnvSpec::new(EnvParts {
        name: "matrix_game".into(),
        actions_per_agent: vec![2, 2],
        n_states: 4,
        transitions,
        reward: vec![0.0, 1.0, 5.0, 6.0],
        terminal: vec![false, true, true, true],
        initial: vec![(START, 1.0)],
        horizon: Some(1),
    })
    .expect("matrix game is well formed")
}

/// Behavior of the matrix-game dataset: agent 0 plays a1 with 0.8, agent 1
/// plays a1 with 0.4.
pub fn matrix_game_behavior() -> JointPolicy {
    JointPolicy::state_independent(&matrix_game(), &[vec![0.8, 0.2], vec![0.4, 0.6]])
        .expect("matrix behavior is well formed")
}

/// Shared reward of the Differential Game at positions `(x1, x2)`.
pub fn dg_reward(x1: f64, x2: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x1) || !(-1.0..=1.0).contains(&x2) {
        return Err(Error::invalid(format!(
            "positions ({x1}, {x2}) outside [-1, 1]"
        )));
    }
    let l = (x1 * x1 + x2 * x2).sqrt();
    Ok(if l < 0.2 {
        0.5 * ((15.0 * l).cos() + 1.0)
    } else if l <= 0.6 {
        0.0
    } else {
        0.5 * (l - 0.6).powi(2)
    })
}

/// Grid geometry of the discretized Differential Game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgGrid {
    pub pos_bins: usize,
    pub act_bins: usize,
}

impl DgGrid {
    pub const MAX_SPEED: f64 = 0.1;

    pub fn new(pos_bins: usize, act_bins: usize) -> Result<Self> {
        if pos_bins < 3 || pos_bins.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "pos_bins must be odd and >= 3, got {pos_bins}"
            )));
        }
        if act_bins < 3 || act_bins.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "act_bins must be odd and >= 3, got {act_bins}"
            )));
        }
        Ok(Self { pos_bins, act_bins })
    }

    pub fn n_states(&self) -> usize {
        self.pos_bins * self.pos_bins
    }

    pub fn position(&self, bin: usize) -> f64 {
        let half = ((self.pos_bins - 1) / 2) as f64;
        (bin as f64 - half) / half
    }

    pub fn speed(&self, action: usize) -> f64 {
        let half = ((self.act_bins - 1) / 2) as f64;
        Self::MAX_SPEED * (action as f64 - half) / half
    }

    pub fn state(&self, bin1: usize, bin2: usize) -> usize {
        bin1 * self.pos_bins + bin2
    }

    pub fn bins(&self, state: usize) -> (usize, usize) {
        (state / self.pos_bins, state % self.pos_bins)
    }

    /// Bin reached from `bin` under `action`, clamped to the grid. Exact
    /// half-bin displacements round to the even bin index, which keeps the
    /// dynamics mirror-symmetric about the origin.
    pub fn move_bin(&self, bin: usize, action: usize) -> usize {
        let pos_half = ((self.pos_bins - 1) / 2) as f64;
        let act_half = ((self.act_bins - 1) / 2) as f64;
        // displacement in bin units; bin width is 1 / pos_half
        let disp = (action as f64 - act_half) * (Self::MAX_SPEED * pos_half) / act_half;
        let target = (bin as f64 + disp).clamp(0.0, (self.pos_bins - 1) as f64);
        target.round_ties_even() as usize
    }
}

/// The Differential Game on a `pos_bins x pos_bins` grid with `act_bins`
/// speeds per agent in `[-0.1, 0.1]`. Episodes start uniformly over the grid
/// and last `horizon` steps; there are no terminal states.
pub fn discretized_dg(pos_bins: usize, act_bins: usize, horizon: usize) -> Result<EnvSpec> {
    let grid = DgGrid::new(pos_bins, act_bins)?;
    if horizon == 0 {
        return Err(Error::invalid("horizon must be positive"));
    }
    let n = grid.n_states();
    let n_joint = act_bins * act_bins;
    let mut transitions = Vec::with_capacity(n * n_joint);
    let mut reward = Vec::with_capacity(n);
    for s in 0..n {
        let (b1, b2) = grid.bins(s);
        reward.push(dg_reward(grid.position(b1), grid.position(b2))?);
        for a1 in 0..act_bins {
            for a2 in 0..act_bins {
                let next = grid.state(grid.move_bin(b1, a1), grid.move_bin(b2, a2));
                transitions.push(vec![(next, 1.0)]);
            }
        }
    }
    EnvSpec::new(EnvParts {
        name: format!("differential_game_{pos_bins}x{act_bins}"),
        actions_per_agent: vec![act_bins, act_bins],
        n_states: n,
        transitions,
        reward,
        terminal: vec![false; n],
        initial: (0..n).map(|s| (s, 1.0 / n as f64)).collect(),
        horizon: Some(horizon),
    })
}

pub(crate) fn dirichlet_row<R: Rng + ?Sized>(targets: &[usize], rng: &mut R) -> Categorical {
    let draws: Vec<f64> = targets
        .iter()
        .map(|_| {
            let x: f64 = Exp1.sample(rng);
            x.max(f64::MIN_POSITIVE)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    targets.iter().zip(draws).map(|(&s, x)| (s, x / total)).collect()
}

fn check_reward_range(r_min: f64, r_max: f64) -> Result<()> {
    if !(r_min > 0.0) {
        return Err(Error::invalid(format!("r_min must be positive, got {r_min}")));
    }
    if !(r_max >= r_min) || !r_max.is_finite() {
        return Err(Error::invalid(format!("need r_min <= r_max, got [{r_min}, {r_max}]")));
    }
    Ok(())
}

/// Continuing random MDP: every `(state, joint action)` row is a symmetric
/// Dirichlet(1) draw over all states and rewards are uniform in
/// `[r_min, r_max]`. Episodes start uniformly; no terminals, no horizon.
pub fn random_mdp(
    n_states: usize,
    n_actions_per_agent: usize,
    n_agents: usize,
    r_min: f64,
    r_max: f64,
    seed: u64,
) -> Result<EnvSpec> {
    check_reward_range(r_min, r_max)?;
    if n_states == 0 || n_actions_per_agent == 0 || n_agents == 0 {
        return Err(Error::invalid("random_mdp sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_joint = n_actions_per_agent.pow(n_agents as u32);
    let all: Vec<usize> = (0..n_states).collect();
    let transitions = (0..n_states * n_joint)
        .map(|_| dirichlet_row(&all, &mut rng))
        .collect();
    let reward = (0..n_states)
        .map(|_| r_min + (r_max - r_min) * rng.random::<f64>())
        .collect();
    EnvSpec::new(EnvParts {
        name: format!("random_mdp_s{n_states}_a{n_actions_per_agent}_n{n_agents}_seed{seed}"),
        actions_per_agent: vec![n_actions_per_agent; n_agents],
        n_states,
        transitions,
        reward,
        terminal: vec![false; n_states],
        initial: all.iter().map(|&s| (s, 1.0 / n_states as f64)).collect(),
        horizon: None,
    })
}

/// Episodic random MDP over a chain of states: state `k` moves only to
/// states `> k` (Dirichlet(1) over them) and the last state is terminal, so
/// every trajectory from state 0 terminates within `n_states - 1` steps.
pub fn episodic_random_mdp(
    n_states: usize,
    n_actions_per_agent: usize,
    n_agents: usize,
    r_min: f64,
    r_max: f64,
    seed: u64,
) -> Result<EnvSpec> {
    check_reward_range(r_min, r_max)?;
    if n_states < 2 || n_actions_per_agent == 0 || n_agents == 0 {
        return Err(Error::invalid("episodic_random_mdp needs >= 2 states and >= 1 action"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_joint = n_actions_per_agent.pow(n_agents as u32);
    let mut transitions = Vec::with_capacity(n_states * n_joint);
    for s in 0..n_states {
        let later: Vec<usize> = (s + 1..n_states).collect();
        for _ in 0..n_joint {
            transitions.push(if later.is_empty() {
                Vec::new()
            } else {
                dirichlet_row(&later, &mut rng)
            });
        }
    }
    let reward = (0..n_states)
        .map(|_| r_min + (r_max - r_min) * rng.random::<f64>())
        .collect();
    let mut terminal = vec![false; n_states];
    terminal[n_states - 1] = true;
    EnvSpec::new(EnvParts {
        name: format!("episodic_mdp_s{n_states}_a{n_actions_per_agent}_n{n_agents}_seed{seed}"),
        actions_per_agent: vec![n_actions_per_agent; n_agents],
        n_states,
        transitions,
        reward,
        terminal,
        initial: vec![(0, 1.0)],
        horizon: None,
    })
}

/// Fixed-horizon random MDP: `layers` decision layers of `width` states
/// each, followed by a terminal layer. Every trajectory takes exactly
/// `layers` steps, so each episode collects the same number of rewards.
pub fn layered_random_mdp(
    layers: usize,
    width: usize,
    n_actions_per_agent: usize,
    n_agents: usize,
    r_min: f64,
    r_max: f64,
    seed: u64,
) -> Result<EnvSpec> {
    check_reward_range(r_min, r_max)?;
    if layers == 0 || width == 0 || n_actions_per_agent == 0 || n_agents == 0 {
        return Err(Error::invalid("layered_random_mdp sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = (layers + 1) * width;
    let n_joint = n_actions_per_agent.pow(n_agents as u32);
    let mut transitions = Vec::with_capacity(n_states * n_joint);
    for t in 0..=layers {
        let next: Vec<usize> = (0..width).map(|k| (t + 1) * width + k).collect();
        for _ in 0..width * n_joint {
            transitions.push(if t == layers {
                Vec::new()
            } else {
                dirichlet_row(&next, &mut rng)
            });
        }
    }
    let reward = (0..n_states)
        .map(|_| r_min + (r_max - r_min) * rng.random::<f64>())
        .collect();
    let terminal = (0..n_states).map(|s| s >= layers * width).collect();
    EnvSpec::new(EnvParts {
        name: format!("layered_mdp_l{layers}_w{width}_a{n_actions_per_agent}_n{n_agents}_seed{seed}"),
        actions_per_agent: vec![n_actions_per_agent; n_agents],
        n_states,
        transitions,
        reward,
        terminal,
        initial: (0..width).map(|k| (k, 1.0 / width as f64)).collect(),
        horizon: Some(layers),
    })
}
