//! Exact modified value iteration, weighted TD learning, greedy extraction
//! and reward rescaling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::AgentDataset;
use crate::empirical::EmpiricalModel;
use crate::error::{Error, Result};
use crate::qtable::QTable;
use crate::transforms::{backup_values, deviation_value, modify_row, DeviationTarget, TransformSpec};

/// How TD sample weights are scaled before entering the step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScale {
    /// `lambda_tn * lambda_vd` as is.
    Literal,
    /// Divided by the largest weight over the pair's support, so
    /// `lr * w <= lr`. Slow when a rare successor dominates the maximum.
    PairMax,
    /// Divided by the pair's mean weight under `P_B` (the normalizer), i.e.
    /// `w = P_hat(s') / P_B(s')`; the average step is then `lr`.
    #[default]
    PairMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Trailing share of TD steps run at `lr / 10`.
    pub polish_fraction: f64,
    /// Return the average of the iterates over the polishing phase instead
    /// of the last iterate.
    pub average_polish: bool,
    /// TD steps between recomputations of a pair's weights.
    pub refresh_period: usize,
    pub weight_scale: WeightScale,
    /// TD aborts once `|Q|` exceeds this multiple of `max|R| / (1 - gamma)`.
    pub divergence_factor: f64,
    /// Initial value of every in-support entry.
    pub init: f64,
    #[serde(skip)]
    pub transform: TransformSpec,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            tol: 1e-10,
            max_sweeps: 10_000,
            lr: 0.01,
            steps: 100_000,
            seed: 0,
            polish_fraction: 0.5,
            average_polish: true,
            refresh_period: 1,
            weight_scale: WeightScale::PairMean,
            divergence_factor: 10.0,
            init: 0.0,
            transform: TransformSpec::default(),
        }
    }
}

impl LearnConfig {
    pub fn with_transform(mut self, transform: TransformSpec) -> Self {
        self.transform = transform;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(Error::invalid(format!("lr must lie in (0, 1], got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.polish_fraction) {
            return Err(Error::invalid("polish_fraction must lie in [0, 1]"));
        }
        if self.refresh_period == 0 {
            return Err(Error::invalid("refresh_period must be >= 1"));
        }
        if !(self.divergence_factor > 0.0) || !self.init.is_finite() {
            return Err(Error::invalid("divergence_factor must be positive and init finite"));
        }
        self.transform.validate()
    }
}

/// One application of the modified Bellman operator. Weights are computed
/// from `q` itself, so repeated application is non-stationary.
pub fn modified_bellman_operator(
    model: &EmpiricalModel,
    q: &QTable,
    gamma: f64,
    spec: &TransformSpec,
) -> Result<QTable> {
    let u = backup_values(model, q, gamma);
    let dev: Vec<f64> = match spec.deviation_target {
        DeviationTarget::Backup => u.clone(),
        DeviationTarget::NextValue => (0..model.n_states()).map(|s| q.value_or_zero(s)).collect(),
    };
    let mut next = q.clone();
    for (s, a) in model.visited_pairs() {
        let w = modify_row(model.row(s, a)?, |n| dev[n], spec, s, a)?;
        next.set(s, a, w.expectation(|n| u[n]));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIterationTrace {
    pub q: QTable,
    /// Sup-norm change of every sweep.
    pub residuals: Vec<f64>,
}

/// Sweeps `Q <- T Q` from `init` until the sup-norm change drops below
/// `config.tol`.
pub fn run_value_iteration(
    model: &EmpiricalModel,
    config: &LearnConfig,
    init: QTable,
) -> Result<ValueIterationTrace> {
    config.validate()?;
    let mut q = init;
    let mut residuals = Vec::new();
    for _ in 0..config.max_sweeps {
        let next = modified_bellman_operator(model, &q, config.gamma, &config.transform)?;
        let residual = next.sup_distance(&q);
        q = next;
        residuals.push(residual);
        if residual < config.tol {
            return Ok(ValueIterationTrace { q, residuals });
        }
    }
    Err(Error::NotConverged {
        sweeps: config.max_sweeps,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

pub fn modified_value_iteration(model: &EmpiricalModel, config: &LearnConfig) -> Result<QTable> {
    run_value_iteration(model, config, QTable::filled(model, config.init)).map(|t| t.q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdTrace {
    pub q: QTable,
    /// `(last step of block, mean weighted squared TD error over the block)`.
    pub loss: Vec<(usize, f64)>,
}

const LOSS_BLOCK: usize = 1000;

/// (step computed, weight per successor, sorted by successor)
type CachedWeights = (usize, Vec<(usize, f64)>);

pub fn weighted_td_learning(
    dataset: &AgentDataset,
    model: &EmpiricalModel,
    config: &LearnConfig,
) -> Result<QTable> {
    run_weighted_td(dataset, model, config, QTable::filled(model, config.init)).map(|t| t.q)
}

/// Samples records uniformly and applies
/// `Q(s,a) += lr * w(s') * (R(s') + gamma * V*(s') - Q(s,a))` with
/// `w = lambda_tn * lambda_vd` from the current `Q`.
pub fn run_weighted_td(
    dataset: &AgentDataset,
    model: &EmpiricalModel,
    config: &LearnConfig,
    init: QTable,
) -> Result<TdTrace> {
    config.validate()?;
    let mut q = init;
    if config.steps == 0 {
        return Ok(TdTrace { q, loss: Vec::new() });
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot run TD on an empty dataset"));
    }
    let gamma = config.gamma;
    let spec = &config.transform;
    let r_abs = model
        .rewards()
        .iter()
        .flatten()
        .fold(0.0_f64, |m, r| m.max(r.abs()));
    let bound = r_abs / (1.0 - gamma) * config.divergence_factor;
    let polish_from = config.steps - (config.steps as f64 * config.polish_fraction).round() as usize;

    let n_actions = model.n_actions();
    let mut cache: Vec<Option<CachedWeights>> = vec![None; model.n_states() * n_actions];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss = Vec::new();
    let mut block = 0.0;
    let mut avg_sum = vec![0.0; model.n_states() * n_actions];
    let mut avg_since = vec![0usize; model.n_states() * n_actions];

    for step in 0..config.steps {
        let rec = dataset.records[rng.random_range(0..dataset.len())];
        let (s, a, next) = (rec.state, rec.action, rec.next_state);
        let slot = &mut cache[s * n_actions + a];
        let stale = slot
            .as_ref()
            .is_none_or(|(at, _)| step - at >= config.refresh_period);
        if stale {
            let value = |n| deviation_value(model, &q, n, gamma, spec.deviation_target);
            let support = modify_row(model.row(s, a)?, value, spec, s, a)?;
            let mut weights: Vec<(usize, f64)> = support
                .entries
                .iter()
                .map(|e| (e.next, e.lambda_tn * e.lambda_vd))
                .collect();
            let divisor = match config.weight_scale {
                WeightScale::Literal => 1.0,
                WeightScale::PairMax => weights.iter().map(|w| w.1).fold(0.0, f64::max),
                WeightScale::PairMean => support.normalizer,
            };
            weights.iter_mut().for_each(|w| w.1 /= divisor);
            *slot = Some((step, weights));
        }
        let weights = &slot.as_ref().expect("filled above").1;
        let w = weights
            .binary_search_by_key(&next, |&(n, _)| n)
            .map(|i| weights[i].1)
            .map_err(|_| Error::NoData { state: s, action: a })?;

        let reward = model.reward(next).unwrap_or(rec.reward);
        let target = reward + gamma * q.value_or_zero(next);
        let lr = if step >= polish_from { config.lr / 10.0 } else { config.lr };
        let idx = s * n_actions + a;
        if step >= polish_from {
            // time-weighted running sum, settled lazily per entry
            avg_sum[idx] += q.get(s, a) * (step - avg_since[idx].max(polish_from)) as f64;
            avg_since[idx] = step;
        }
        let entry = q.get_mut(s, a);
        let delta = target - *entry;
        *entry += lr * w * delta;
        block += w * delta * delta;
        if !entry.is_finite() || entry.abs() > bound {
            return Err(Error::Diverged {
                step,
                state: s,
                action: a,
                value: *entry,
                bound,
            });
        }
        if (step + 1) % LOSS_BLOCK == 0 || step + 1 == config.steps {
            let len = step % LOSS_BLOCK + 1;
            loss.push((step, block / len as f64));
            block = 0.0;
        }
    }
    if config.average_polish && polish_from < config.steps {
        let span = (config.steps - polish_from) as f64;
        let pairs: Vec<(usize, usize, f64)> = q.entries().collect();
        for (s, a, value) in pairs {
            let idx = s * n_actions + a;
            let tail = value * (config.steps - avg_since[idx].max(polish_from)) as f64;
            q.set(s, a, (avg_sum[idx] + tail) / span);
        }
    }
    Ok(TdTrace { q, loss })
}

/// Per-state greedy action of one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyPolicy {
    pub actions: Vec<usize>,
    /// States without any in-support action; they act with action 0.
    pub fallback_states: Vec<usize>,
}

impl GreedyPolicy {
    pub fn from_actions(actions: Vec<usize>) -> Self {
        Self {
            actions,
            fallback_states: Vec::new(),
        }
    }

    pub fn action(&self, state: usize) -> usize {
        self.actions[state]
    }
}

/// Maximizing in-support action per state; ties go to the lowest index.
pub fn greedy_policy(q: &QTable) -> GreedyPolicy {
    let mut fallback_states = Vec::new();
    let actions = (0..q.n_states())
        .map(|s| {
            q.greedy_action(s).unwrap_or_else(|| {
                fallback_states.push(s);
                0
            })
        })
        .collect();
    if !fallback_states.is_empty() {
        log::debug!(
            "{} state(s) have no in-support action (terminal or unvisited); acting with action 0 there",
            fallback_states.len()
        );
    }
    GreedyPolicy {
        actions,
        fallback_states,
    }
}

/// Largest discount for which the combined operator is a contraction on
/// rewards in `[r_min, r_max]`: `r_min / (2 r_max - r_min)`.
pub fn gamma_bound(r_min: f64, r_max: f64) -> Result<f64> {
    if !(r_min > 0.0) {
        return Err(Error::invalid(format!("r_min must be positive, got {r_min}")));
    }
    if !(r_max >= r_min) {
        return Err(Error::invalid(format!("need r_min <= r_max, got [{r_min}, {r_max}]")));
    }
    Ok(r_min / (2.0 * r_max - r_min))
}

/// `r -> scale * r + shift` with `scale > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineReward {
    pub scale: f64,
    pub shift: f64,
}

impl AffineReward {
    /// Maps `[lo, hi]` onto `[new_min, new_max]`; a constant source
    /// (`lo == hi`) is shifted onto `new_min`.
    pub fn fit(lo: f64, hi: f64, new_min: f64, new_max: f64) -> Result<Self> {
        if !(new_min > 0.0 && new_min < new_max) {
            return Err(Error::invalid(format!(
                "rescale target must satisfy 0 < min < max, got [{new_min}, {new_max}]"
            )));
        }
        if !(lo <= hi) {
            return Err(Error::invalid(format!("bad source range [{lo}, {hi}]")));
        }
        if lo == hi {
            return Ok(Self {
                scale: 1.0,
                shift: new_min - lo,
            });
        }
        let scale = (new_max - new_min) / (hi - lo);
        Ok(Self {
            scale,
            shift: new_min - scale * lo,
        })
    }

    pub fn apply(&self, r: f64) -> f64 {
        self.scale * r + self.shift
    }
}

/// Things whose rewards can be affinely rescaled.
pub trait RescaleRewards: Sized {
    fn observed_reward_range(&self) -> Option<(f64, f64)>;
    fn map_reward(&self, f: impl Fn(f64) -> f64) -> Self;
}

impl RescaleRewards for EmpiricalModel {
    fn observed_reward_range(&self) -> Option<(f64, f64)> {
        self.reward_range()
    }

    fn map_reward(&self, f: impl Fn(f64) -> f64) -> Self {
        self.map_rewards(f)
    }
}

impl RescaleRewards for AgentDataset {
    fn observed_reward_range(&self) -> Option<(f64, f64)> {
        self.records.iter().fold(None, |acc, r| {
            Some(match acc {
                None => (r.reward, r.reward),
                Some((lo, hi)) => (f64::min(lo, r.reward), f64::max(hi, r.reward)),
            })
        })
    }

    fn map_reward(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.reward = f(r.reward));
        out
    }
}

/// The affine map that sends the observed reward range onto
/// `[new_min, new_max]`.
pub fn fit_rescale<T: RescaleRewards>(source: &T, new_min: f64, new_max: f64) -> Result<AffineReward> {
    let (lo, hi) = source
        .observed_reward_range()
        .ok_or_else(|| Error::invalid("no rewards to rescale"))?;
    AffineReward::fit(lo, hi, new_min, new_max)
}

pub fn rescale_rewards<T: RescaleRewards>(source: &T, new_min: f64, new_max: f64) -> Result<T> {
    let map = fit_rescale(source, new_min, new_max)?;
    Ok(source.map_reward(|r| map.apply(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect;
    use crate::empirical::{build_model, exact_model_from_env};
    use crate::env::{layered_random_mdp, matrix_game, EnvSpec, JointPolicy};
    use crate::transforms::TransformMode;

    fn mg() -> (EnvSpec, JointPolicy) {
        let env = matrix_game();
        let beh = JointPolicy::state_independent(&env, &[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        (env, beh)
    }

    fn mg_q(agent: usize, mode: TransformMode) -> QTable {
        let (env, beh) = mg();
        let model = exact_model_from_env(&env, &beh, agent).unwrap();
        let cfg = LearnConfig::default().with_transform(TransformSpec::new(mode));
        modified_value_iteration(&model, &cfg).unwrap()
    }

    #[test]
    fn vi_reproduces_combined_table() {
        let q1 = mg_q(0, TransformMode::VdTn);
        assert!((q1.get(0, 0) - 13.0 / 3.0).abs() < 1e-12);
        assert!((q1.get(0, 1) - 37.0 / 7.0).abs() < 1e-12);
        assert!((q1.get(0, 0) - 4.33).abs() < 0.005);
        assert!((q1.get(0, 1) - 5.29).abs() < 0.005);
        let q2 = mg_q(1, TransformMode::VdTn);
        assert!((q2.get(0, 0) - 37.0 / 7.0).abs() < 1e-12);
        assert!((q2.get(0, 1) - 13.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vi_value_deviation_only() {
        let q2 = mg_q(1, TransformMode::Vd);
        assert!((q2.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((q2.get(0, 1) - 20.2 / 4.2).abs() < 1e-12);
        let q1 = mg_q(0, TransformMode::Vd);
        assert!((q1.get(0, 0) - 15.4 / 3.4).abs() < 1e-12);
        assert!((q1.get(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn vi_without_transform_is_plain() {
        let q1 = mg_q(0, TransformMode::None);
        assert!((q1.get(0, 0) - 3.4).abs() < 1e-12);
        assert!((q1.get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_joint_actions() {
        let a = |mode| {
            (
                greedy_policy(&mg_q(0, mode)).action(0),
                greedy_policy(&mg_q(1, mode)).action(0),
            )
        };
        assert_eq!(a(TransformMode::VdTn), (1, 0));
        assert_eq!(a(TransformMode::None), (0, 1));
    }

    #[test]
    fn greedy_ties_and_fallback() {
        let (env, beh) = mg();
        let model = exact_model_from_env(&env, &beh, 0).unwrap();
        let q = QTable::filled(&model, 2.0);
        let p = greedy_policy(&q);
        assert_eq!(p.action(0), 0);
        assert_eq!(p.fallback_states, vec![1, 2, 3]);
        assert_eq!(greedy_policy(&q), p);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let (env, beh) = mg();
        let model = exact_model_from_env(&env, &beh, 0).unwrap();
        let cfg = LearnConfig {
            max_sweeps: 1,
            ..Default::default()
        };
        match modified_value_iteration(&model, &cfg) {
            Err(Error::NotConverged { sweeps: 1, residual }) => assert!(residual > 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        for cfg in [
            LearnConfig { gamma: 1.0, ..Default::default() },
            LearnConfig { gamma: 0.0, ..Default::default() },
            LearnConfig { tol: 0.0, ..Default::default() },
            LearnConfig { lr: 1.5, ..Default::default() },
            LearnConfig { refresh_period: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn td_zero_steps_is_identity() {
        let (env, beh) = mg();
        let data = collect(&env, &beh, 100, 1).unwrap();
        let model = build_model(&data[0], 4, 2).unwrap();
        let cfg = LearnConfig { steps: 0, init: 1.5, ..Default::default() };
        assert_eq!(weighted_td_learning(&data[0], &model, &cfg).unwrap(), QTable::filled(&model, 1.5));
    }

    #[test]
    fn td_on_single_transition_converges_to_reward() {
        let env = matrix_game();
        let beh = JointPolicy::state_independent(&env, &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let data = collect(&env, &beh, 10, 1).unwrap();
        let model = build_model(&data[0], 4, 2).unwrap();
        let cfg = LearnConfig { steps: 5000, lr: 0.5, ..Default::default() };
        let q = weighted_td_learning(&data[0], &model, &cfg).unwrap();
        assert!((q.get(0, 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn td_matches_vi_on_matrix_game() {
        let (env, beh) = mg();
        let data = collect(&env, &beh, 10_000, 7).unwrap();
        for agent in 0..2 {
            let model = build_model(&data[agent], 4, 2).unwrap();
            let cfg = LearnConfig { seed: 3, ..Default::default() }
                .with_transform(TransformSpec::new(TransformMode::VdTn));
            let vi = modified_value_iteration(&model, &cfg).unwrap();
            let td = weighted_td_learning(&data[agent], &model, &cfg).unwrap();
            assert!(td.sup_distance(&vi) < 0.05, "agent {agent}: {}", td.sup_distance(&vi));
            assert_eq!(td, weighted_td_learning(&data[agent], &model, &cfg).unwrap());
        }
    }

    #[test]
    fn td_divergence_guard() {
        let (env, beh) = mg();
        let data = collect(&env, &beh, 100, 1).unwrap();
        let model = build_model(&data[0], 4, 2).unwrap();
        let cfg = LearnConfig { init: 1e6, steps: 10, ..Default::default() };
        assert!(matches!(
            weighted_td_learning(&data[0], &model, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn gamma_bound_values() {
        assert!((gamma_bound(1.0, 5.0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(gamma_bound(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(gamma_bound(2.0, 3.0).unwrap(), 0.5);
        assert!(gamma_bound(0.0, 1.0).is_err());
        assert!(gamma_bound(-1.0, 1.0).is_err());
    }

    #[test]
    fn affine_fit() {
        let m = AffineReward::fit(1.0, 5.0, 4.0, 5.0).unwrap();
        assert_eq!(m, AffineReward { scale: 0.25, shift: 3.75 });
        let id = AffineReward::fit(1.0, 5.0, 1.0, 5.0).unwrap();
        assert_eq!(id, AffineReward { scale: 1.0, shift: 0.0 });
        assert_eq!(AffineReward::fit(3.0, 3.0, 1.0, 2.0).unwrap().apply(3.0), 1.0);
        assert!(AffineReward::fit(1.0, 5.0, 0.0, 1.0).is_err());
        assert!(AffineReward::fit(1.0, 5.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn rescaling_dataset_and_model() {
        let (env, beh) = mg();
        let data = collect(&env, &beh, 200, 5).unwrap();
        let scaled = rescale_rewards(&data[0], 4.0, 5.0).unwrap();
        assert_eq!(scaled.observed_reward_range(), Some((4.0, 5.0)));
        let model = exact_model_from_env(&env, &beh, 0).unwrap();
        let scaled = rescale_rewards(&model, 1.0, 2.0).unwrap();
        assert_eq!(scaled.reward_range(), Some((1.0, 2.0)));
        assert_eq!(scaled.reward(0), Some(1.0));
        assert!(rescale_rewards(&model, 0.0, 6.0).is_err());
    }

    #[test]
    fn affine_rescaling_keeps_greedy_on_fixed_horizon() {
        for seed in 0..10 {
            let env = layered_random_mdp(4, 3, 3, 2, 1.0, 5.0, seed).unwrap();
            let model = exact_model_from_env(&env, &JointPolicy::uniform(&env), 0).unwrap();
            let cfg = LearnConfig { gamma: 0.9, ..Default::default() };
            let before = greedy_policy(&modified_value_iteration(&model, &cfg).unwrap());
            let scaled = rescale_rewards(&model, 4.0, 5.0).unwrap();
            let after = greedy_policy(&modified_value_iteration(&scaled, &cfg).unwrap());
            assert_eq!(before, after, "seed {seed}");
        }
    }
}
