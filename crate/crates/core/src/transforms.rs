//! Value deviation and transition normalization.
//!
//! For a visited pair `(s, a)` with offline kernel `P_B(.|s,a)` the modified
//! kernel is
//!
//! ```text
//! P_hat(s') = P_B(s') * lambda_tn(s') * lambda_vd(s') / z
//! lambda_tn(s') = 1 / P_B(s')
//! lambda_vd(s') = 1 + (U(s') - E[U]) / |E[U]|,   E[U] = sum_s' P_B(s') U(s')
//! ```
//!
//! where `U(s') = R(s') + gamma * V*(s')` is the backup value of the
//! successor and `z` the sum of the unnormalized masses. With both factors
//! and no clipping this is `U(s') / sum_support U`.
//!
//! Deviation is taken on the backup value rather than on `V*(s')` alone
//! because rewards are attached to states: terminal successors have
//! `V* = 0` but carry their entry reward in `U`. [`DeviationTarget::NextValue`]
//! switches to the `V*` form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::empirical::{EmpiricalModel, SupportRow};
use crate::error::{Error, Result};
use crate::qtable::QTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    None,
    Vd,
    Tn,
    VdTn,
}

impl TransformMode {
    pub const ALL: [TransformMode; 4] = [Self::None, Self::Vd, Self::Tn, Self::VdTn];

    pub fn uses_vd(self) -> bool {
        matches!(self, Self::Vd | Self::VdTn)
    }

    pub fn uses_tn(self) -> bool {
        matches!(self, Self::Tn | Self::VdTn)
    }
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Vd => "vd",
            Self::Tn => "tn",
            Self::VdTn => "vd_tn",
        })
    }
}

impl FromStr for TransformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "vd" => Self::Vd,
            "tn" => Self::Tn,
            "vd_tn" | "vd+tn" => Self::VdTn,
            other => return Err(Error::invalid(format!("unknown transform mode `{other}`"))),
        })
    }
}

/// Which successor value the deviation is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationTarget {
    /// `R(s') + gamma * V*(s')`.
    #[default]
    Backup,
    /// `V*(s')` alone.
    NextValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub mode: TransformMode,
    /// Optimism level: half-width of the clipping window around 1.
    pub epsilon: f64,
    pub clip_enabled: bool,
    pub value_floor: f64,
    pub deviation_target: DeviationTarget,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            mode: TransformMode::None,
            epsilon: 0.5,
            clip_enabled: false,
            value_floor: 1e-8,
            deviation_target: DeviationTarget::Backup,
        }
    }
}

impl TransformSpec {
    pub fn new(mode: TransformMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn clipped(mut self, epsilon: f64) -> Self {
        self.clip_enabled = true;
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.value_floor > 0.0) {
            return Err(Error::invalid(format!(
                "value_floor must be > 0, got {}",
                self.value_floor
            )));
        }
        Ok(())
    }

    fn clamp_deviation(&self, lambda: f64) -> f64 {
        let lambda = if self.clip_enabled {
            lambda.clamp(1.0 - self.epsilon, 1.0 + self.epsilon)
        } else {
            lambda
        };
        lambda.max(self.value_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedNext {
    pub next: usize,
    pub prob_b: f64,
    pub lambda_tn: f64,
    pub lambda_vd: f64,
    pub modified_prob: f64,
}

/// Modified next-state distribution of one visited `(s, a)`. Factors not
/// selected by the mode are reported as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSupport {
    pub entries: Vec<WeightedNext>,
    /// Sum of the unnormalized masses.
    pub normalizer: f64,
}

impl WeightedSupport {
    pub fn prob(&self, next: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.next == next)
            .map_or(0.0, |e| e.modified_prob)
    }

    /// `sum_s' P_hat(s') * value(s')`.
    pub fn expectation(&self, value: impl Fn(usize) -> f64) -> f64 {
        self.entries.iter().map(|e| e.modified_prob * value(e.next)).sum()
    }
}

/// `U(s') = R(s') + gamma * V*(s')`, with `V*` zero where no action is in support.
pub fn backup_value(model: &EmpiricalModel, q: &QTable, next: usize, gamma: f64) -> f64 {
    model.reward(next).unwrap_or(0.0) + gamma * q.value_or_zero(next)
}

/// Backup values of every state.
pub fn backup_values(model: &EmpiricalModel, q: &QTable, gamma: f64) -> Vec<f64> {
    (0..model.n_states())
        .map(|s| backup_value(model, q, s, gamma))
        .collect()
}

/// The per-successor quantity the deviation is measured on.
pub(crate) fn deviation_value(
    model: &EmpiricalModel,
    q: &QTable,
    next: usize,
    gamma: f64,
    target: DeviationTarget,
) -> f64 {
    match target {
        DeviationTarget::Backup => backup_value(model, q, next, gamma),
        DeviationTarget::NextValue => q.value_or_zero(next),
    }
}

/// `sum_s' P_B(s'|s,a) U(s')`.
pub fn expected_backup(
    model: &EmpiricalModel,
    q: &QTable,
    state: usize,
    action: usize,
    gamma: f64,
) -> Result<f64> {
    let row = model.row(state, action)?;
    Ok(row
        .probabilities()
        .map(|(next, p)| p * backup_value(model, q, next, gamma))
        .sum())
}

fn deviation_row(
    row: &SupportRow,
    value: impl Fn(usize) -> f64,
    spec: &TransformSpec,
    state: usize,
    action: usize,
) -> Result<Vec<f64>> {
    let values: Vec<f64> = row.states().map(&value).collect();
    let mean: f64 = row.probabilities().zip(&values).map(|((_, p), v)| p * v).sum();
    if mean.abs() < spec.value_floor {
        return Err(Error::Degenerate(format!(
            "expected successor value {mean:e} at ({state}, {action}) is below the floor {:e}",
            spec.value_floor
        )));
    }
    Ok(values
        .into_iter()
        .map(|v| spec.clamp_deviation(1.0 + (v - mean) / mean.abs()))
        .collect())
}

/// `lambda_vd(s')` for every successor of a visited `(s, a)`.
pub fn value_deviation(
    model: &EmpiricalModel,
    q: &QTable,
    state: usize,
    action: usize,
    gamma: f64,
    spec: &TransformSpec,
) -> Result<Vec<(usize, f64)>> {
    spec.validate()?;
    let row = model.row(state, action)?;
    let value = |next| deviation_value(model, q, next, gamma, spec.deviation_target);
    let lambdas = deviation_row(row, value, spec, state, action)?;
    Ok(row.states().zip(lambdas).collect())
}

/// `lambda_tn(s') = 1 / P_B(s'|s,a)` over the support.
pub fn transition_normalization(
    model: &EmpiricalModel,
    state: usize,
    action: usize,
) -> Result<Vec<(usize, f64)>> {
    Ok(model
        .row(state, action)?
        .probabilities()
        .map(|(next, p)| (next, 1.0 / p))
        .collect())
}

/// Applies the mode's factors to one row; `value` gives the deviation
/// quantity of a successor and is only called when the mode uses it.
pub(crate) fn modify_row(
    row: &SupportRow,
    value: impl Fn(usize) -> f64,
    spec: &TransformSpec,
    state: usize,
    action: usize,
) -> Result<WeightedSupport> {
    let vd = if spec.mode.uses_vd() {
        Some(deviation_row(row, value, spec, state, action)?)
    } else {
        None
    };
    let mut entries: Vec<WeightedNext> = row
        .probabilities()
        .enumerate()
        .map(|(k, (next, prob_b))| WeightedNext {
            next,
            prob_b,
            lambda_tn: if spec.mode.uses_tn() { 1.0 / prob_b } else { 1.0 },
            lambda_vd: vd.as_ref().map_or(1.0, |v| v[k]),
            modified_prob: 0.0,
        })
        .collect();
    let masses: Vec<f64> = entries
        .iter()
        .map(|e| e.prob_b * e.lambda_tn * e.lambda_vd)
        .collect();
    let normalizer: f64 = masses.iter().sum();
    if !(normalizer >= spec.value_floor) {
        return Err(Error::Degenerate(format!(
            "modified mass {normalizer:e} at ({state}, {action}) is below the floor"
        )));
    }
    for (e, m) in entries.iter_mut().zip(masses) {
        e.modified_prob = m / normalizer;
    }
    Ok(WeightedSupport {
        entries,
        normalizer,
    })
}

/// The modified distribution `P_hat(.|s,a)` under `spec` at the current `q`.
pub fn modified_transitions(
    model: &EmpiricalModel,
    q: &QTable,
    state: usize,
    action: usize,
    gamma: f64,
    spec: &TransformSpec,
) -> Result<WeightedSupport> {
    spec.validate()?;
    let row = model.row(state, action)?;
    let value = |next| deviation_value(model, q, next, gamma, spec.deviation_target);
    modify_row(row, value, spec, state, action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{matrix, matrix_game, EnvSpec, JointPolicy};
    use crate::empirical::exact_model_from_env;
    use proptest::prelude::*;

    fn mg_models() -> (EmpiricalModel, EmpiricalModel) {
        let env: EnvSpec = matrix_game();
        let beh = JointPolicy::state_independent(&env, &[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        (
            exact_model_from_env(&env, &beh, 0).unwrap(),
            exact_model_from_env(&env, &beh, 1).unwrap(),
        )
    }

    fn lookup(v: &[(usize, f64)], s: usize) -> f64 {
        v.iter().find(|(t, _)| *t == s).unwrap().1
    }

    #[test]
    fn backup_of_terminal_is_its_reward() {
        let (m1, _) = mg_models();
        let q = QTable::zeros(&m1);
        for gamma in [0.0, 0.5, 0.99] {
            assert_eq!(backup_value(&m1, &q, matrix::OUTCOME_6, gamma), 6.0);
        }
    }

    #[test]
    fn backup_uses_in_support_max() {
        let m = EmpiricalModel::from_rows(
            2,
            2,
            vec![Some(vec![(1, 1.0)]), None, Some(vec![(1, 1.0)]), Some(vec![(0, 1.0)])],
            vec![Some(0.5), Some(1.0)],
        )
        .unwrap();
        let mut q = QTable::zeros(&m);
        q.set(1, 0, 2.0);
        q.set(1, 1, 3.0);
        assert!((backup_value(&m, &q, 1, 0.99) - 3.97).abs() < 1e-12);
        // state 0 only has action 0 in support
        q.set(0, 0, -1.0);
        assert!((backup_value(&m, &q, 0, 0.5) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn expected_backup_reproduces_dataset_returns() {
        let (m1, m2) = mg_models();
        let q1 = QTable::zeros(&m1);
        let q2 = QTable::zeros(&m2);
        assert!((expected_backup(&m1, &q1, 0, 0, 0.9).unwrap() - 3.4).abs() < 1e-12);
        assert!((expected_backup(&m2, &q2, 0, 1, 0.9).unwrap() - 4.2).abs() < 1e-12);
        let single = EmpiricalModel::from_rows(2, 1, vec![Some(vec![(1, 3.0)]), None], vec![None, Some(2.5)])
            .unwrap();
        let q = QTable::zeros(&single);
        assert_eq!(expected_backup(&single, &q, 0, 0, 0.9).unwrap(), 2.5);
    }

    #[test]
    fn value_deviation_agent1_a1() {
        let (m1, _) = mg_models();
        let q = QTable::zeros(&m1);
        let spec = TransformSpec::new(TransformMode::Vd);
        let lam = value_deviation(&m1, &q, 0, 0, 0.9, &spec).unwrap();
        assert!((lookup(&lam, matrix::OUTCOME_1) - (1.0 - 2.4 / 3.4)).abs() < 1e-12);
        assert!((lookup(&lam, matrix::OUTCOME_1) - 0.2941).abs() < 1e-4);
        assert!((lookup(&lam, matrix::OUTCOME_5) - 1.4706).abs() < 1e-4);
    }

    #[test]
    fn value_deviation_is_one_for_constant_values() {
        let m = EmpiricalModel::from_rows(
            3,
            1,
            vec![Some(vec![(1, 1.0), (2, 3.0)]), None, None],
            vec![None, Some(2.0), Some(2.0)],
        )
        .unwrap();
        let q = QTable::zeros(&m);
        let lam = value_deviation(&m, &q, 0, 0, 0.9, &TransformSpec::new(TransformMode::Vd)).unwrap();
        assert!(lam.iter().all(|&(_, l)| l == 1.0));
    }

    #[test]
    fn clipping_window() {
        let (_, m2) = mg_models();
        let q = QTable::zeros(&m2);
        // agent 2, a1: E = 2, lambda(6) = 3, lambda(1) = 0.5
        let raw = value_deviation(&m2, &q, 0, 0, 0.9, &TransformSpec::new(TransformMode::Vd)).unwrap();
        assert!((lookup(&raw, matrix::OUTCOME_6) - 3.0).abs() < 1e-12);
        let spec = TransformSpec::new(TransformMode::Vd).clipped(0.5);
        let lam = value_deviation(&m2, &q, 0, 0, 0.9, &spec).unwrap();
        assert_eq!(lookup(&lam, matrix::OUTCOME_6), 1.5);
        assert_eq!(lookup(&lam, matrix::OUTCOME_1), 0.5);
        // agent 1, a1: 1.4706 sits inside [0.5, 1.5]
        let (m1, _) = mg_models();
        let lam = value_deviation(&m1, &QTable::zeros(&m1), 0, 0, 0.9, &spec).unwrap();
        assert!((lookup(&lam, matrix::OUTCOME_5) - 5.0 / 3.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_expectation_is_an_error() {
        let m = EmpiricalModel::from_rows(
            3,
            1,
            vec![Some(vec![(1, 1.0), (2, 1.0)]), None, None],
            vec![None, Some(1.0), Some(-1.0)],
        )
        .unwrap();
        let q = QTable::zeros(&m);
        assert!(matches!(
            value_deviation(&m, &q, 0, 0, 0.9, &TransformSpec::new(TransformMode::Vd)),
            Err(Error::Degenerate(_))
        ));
        // V*-form on terminal successors is degenerate too
        let (m1, _) = mg_models();
        let spec = TransformSpec {
            deviation_target: DeviationTarget::NextValue,
            ..TransformSpec::new(TransformMode::Vd)
        };
        assert!(value_deviation(&m1, &QTable::zeros(&m1), 0, 0, 0.9, &spec).is_err());
    }

    #[test]
    fn transition_normalization_is_reciprocal() {
        let (m1, _) = mg_models();
        let tn = transition_normalization(&m1, 0, 0).unwrap();
        assert!((lookup(&tn, matrix::OUTCOME_1) - 2.5).abs() < 1e-12);
        assert!((lookup(&tn, matrix::OUTCOME_5) - 1.0 / 0.6).abs() < 1e-12);
        let uniform = EmpiricalModel::from_rows(
            4,
            1,
            vec![Some(vec![(1, 1.0), (2, 1.0), (3, 1.0)]), None, None, None],
            vec![None, Some(1.0), Some(1.0), Some(1.0)],
        )
        .unwrap();
        let tn = transition_normalization(&uniform, 0, 0).unwrap();
        assert!(tn.iter().all(|&(_, l)| (l - 3.0).abs() < 1e-12));
        let single = EmpiricalModel::from_rows(2, 1, vec![Some(vec![(1, 7.0)]), None], vec![None, Some(1.0)])
            .unwrap();
        assert_eq!(transition_normalization(&single, 0, 0).unwrap(), vec![(1, 1.0)]);
        assert!(matches!(
            transition_normalization(&single, 1, 0),
            Err(Error::NoData { .. })
        ));
    }

    #[test]
    fn modified_transitions_vd_matches_table() {
        let (m1, m2) = mg_models();
        let spec = TransformSpec::new(TransformMode::Vd);
        let w = modified_transitions(&m1, &QTable::zeros(&m1), 0, 0, 0.9, &spec).unwrap();
        // exact: P(5) = 0.6 * 5 / 3.4
        assert!((w.prob(matrix::OUTCOME_5) - 3.0 / 3.4).abs() < 1e-12);
        assert!((w.prob(matrix::OUTCOME_1) - 0.1176).abs() < 1e-4);
        let ret = w.expectation(|s| m1.reward(s).unwrap());
        assert!((ret - 15.4 / 3.4).abs() < 1e-12);
        assert!((ret - 4.529).abs() < 1e-3);

        let w = modified_transitions(&m2, &QTable::zeros(&m2), 0, 1, 0.9, &spec).unwrap();
        assert!((w.prob(matrix::OUTCOME_5) - 4.0 / 4.2).abs() < 1e-12);
        assert!((w.prob(matrix::OUTCOME_1) - 0.048).abs() < 1e-3);
        let ret = w.expectation(|s| m2.reward(s).unwrap());
        assert!((ret - 20.2 / 4.2).abs() < 1e-12);
    }

    #[test]
    fn modified_transitions_vd_tn_is_value_proportional() {
        let (m1, _) = mg_models();
        let spec = TransformSpec::new(TransformMode::VdTn);
        let w = modified_transitions(&m1, &QTable::zeros(&m1), 0, 0, 0.9, &spec).unwrap();
        assert!((w.prob(matrix::OUTCOME_1) - 1.0 / 6.0).abs() < 1e-12);
        assert!((w.prob(matrix::OUTCOME_5) - 5.0 / 6.0).abs() < 1e-12);
        let ret = w.expectation(|s| m1.reward(s).unwrap());
        assert!((ret - 26.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mode_identities() {
        let (m1, _) = mg_models();
        let q = QTable::zeros(&m1);
        let none = modified_transitions(&m1, &q, 0, 0, 0.9, &TransformSpec::new(TransformMode::None)).unwrap();
        for e in &none.entries {
            assert!((e.modified_prob - e.prob_b).abs() < 1e-15);
        }
        let tn = modified_transitions(&m1, &q, 0, 0, 0.9, &TransformSpec::new(TransformMode::Tn)).unwrap();
        for e in &tn.entries {
            assert!((e.modified_prob - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TransformSpec { epsilon: -0.1, ..Default::default() }.validate().is_err());
        assert!(TransformSpec { value_floor: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("vd_tn".parse::<TransformMode>().unwrap(), TransformMode::VdTn);
        assert!("vdtn".parse::<TransformMode>().is_err());
    }

    /// Random visited row over successors `1..=k` with positive rewards and
    /// positive successor values.
    fn random_case() -> impl Strategy<Value = (EmpiricalModel, QTable, f64)> {
        (2usize..7, 0.0f64..0.95).prop_flat_map(|(k, gamma)| {
            (
                prop::collection::vec(1u32..1000, k),
                prop::collection::vec(0.1f64..10.0, k),
                prop::collection::vec(0.0f64..20.0, k),
                Just(gamma),
            )
                .prop_map(move |(counts, rewards, values, gamma)| {
                    let n = k + 1;
                    let mut rows = vec![None; n * 2];
                    rows[0] = Some(counts.iter().enumerate().map(|(i, &c)| (i + 1, c as f64)).collect());
                    for s in 1..n {
                        rows[s * 2] = Some(vec![(s, 1.0)]);
                        rows[s * 2 + 1] = Some(vec![(0, 1.0)]);
                    }
                    let mut rew = vec![Some(1.0)];
                    rew.extend(rewards.iter().map(|&r| Some(r)));
                    let model = EmpiricalModel::from_rows(n, 2, rows, rew).unwrap();
                    let mut q = QTable::zeros(&model);
                    for s in 1..n {
                        q.set(s, 0, values[s - 1]);
                        q.set(s, 1, values[s - 1] * 0.5);
                    }
                    (model, q, gamma)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn vd_tn_equals_value_proportional((model, q, gamma) in random_case()) {
            let w = modified_transitions(&model, &q, 0, 0, gamma, &TransformSpec::new(TransformMode::VdTn)).unwrap();
            let u: Vec<f64> = w.entries.iter().map(|e| backup_value(&model, &q, e.next, gamma)).collect();
            let total: f64 = u.iter().sum();
            for (e, ui) in w.entries.iter().zip(&u) {
                prop_assert!((e.modified_prob - ui / total).abs() < 1e-12);
            }
        }

        #[test]
        fn every_mode_normalizes((model, q, gamma) in random_case(), clip in any::<bool>(), eps in 0.0f64..2.0) {
            for mode in TransformMode::ALL {
                let spec = TransformSpec { mode, clip_enabled: clip, epsilon: eps, ..Default::default() };
                let w = modified_transitions(&model, &q, 0, 0, gamma, &spec).unwrap();
                let sum: f64 = w.entries.iter().map(|e| e.modified_prob).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(w.entries.iter().all(|e| e.modified_prob >= 0.0));
                if clip && mode.uses_vd() {
                    for e in &w.entries {
                        prop_assert!(e.lambda_vd >= f64::max(1.0 - eps, spec.value_floor));
                        prop_assert!(e.lambda_vd <= 1.0 + eps);
                    }
                }
            }
        }

        #[test]
        fn vd_raises_ratio_of_higher_values((model, q, gamma) in random_case()) {
            let w = modified_transitions(&model, &q, 0, 0, gamma, &TransformSpec::new(TransformMode::Vd)).unwrap();
            for a in &w.entries {
                for b in &w.entries {
                    let (ua, ub) = (backup_value(&model, &q, a.next, gamma), backup_value(&model, &q, b.next, gamma));
                    if ua > ub + 1e-9 {
                        prop_assert!(a.modified_prob / a.prob_b > b.modified_prob / b.prob_b);
                    }
                }
            }
        }
    }
}
