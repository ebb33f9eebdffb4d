//! Analytic matrix-game tables: each agent's modified next-state
//! distribution and expected return per action, checked against reference
//! values.

use std::fmt::Write as _;

use crate::empirical::{exact_model_from_env, EmpiricalModel};
use crate::env::{matrix, matrix_game, matrix_game_behavior};
use crate::error::Result;
use crate::learner::{modified_value_iteration, LearnConfig};
use crate::qtable::QTable;
use crate::transforms::{modified_transitions, TransformMode, TransformSpec};

/// Half of the last displayed digit.
pub const CELL_TOLERANCE: f64 = 0.005;

/// Reference cells of one (agent, action): successor probabilities keyed by
/// payoff, in display order, and the expected return.
struct Reference {
    probs: [(u32, f64); 2],
    ret: f64,
}

const fn r(p: [(u32, f64); 2], ret: f64) -> Reference {
    Reference { probs: p, ret }
}

/// Indexed `[agent][action]`.
const NONE: [[Reference; 2]; 2] = [
    [r([(1, 0.4), (5, 0.6)], 3.4), r([(6, 0.4), (1, 0.6)], 3.0)],
    [r([(1, 0.8), (6, 0.2)], 2.0), r([(5, 0.8), (1, 0.2)], 4.2)],
];
const VD: [[Reference; 2]; 2] = [
    [r([(1, 0.12), (5, 0.88)], 4.52), r([(6, 0.8), (1, 0.2)], 5.0)],
    [r([(1, 0.4), (6, 0.6)], 4.0), r([(5, 0.95), (1, 0.05)], 4.8)],
];
const VD_TN: [[Reference; 2]; 2] = [
    [r([(1, 0.17), (5, 0.83)], 4.33), r([(6, 0.86), (1, 0.14)], 5.29)],
    [r([(1, 0.14), (6, 0.86)], 5.29), r([(5, 0.83), (1, 0.17)], 4.33)],
];

fn outcome_state(payoff: u32) -> usize {
    match payoff {
        1 => matrix::OUTCOME_1,
        5 => matrix::OUTCOME_5,
        6 => matrix::OUTCOME_6,
        _ => unreachable!("no outcome pays {payoff}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub agent: usize,
    pub action: usize,
    /// `p(<payoff>)` or `return`.
    pub label: String,
    pub computed: f64,
    pub expected: f64,
}

impl Cell {
    pub fn error(&self) -> f64 {
        (self.computed - self.expected).abs()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.error() <= tol
    }

    pub fn is_return(&self) -> bool {
        self.label == "return"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTable {
    pub mode: TransformMode,
    pub spec: TransformSpec,
    pub cells: Vec<Cell>,
}

impl MatrixTable {
    pub fn probability_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.is_return())
    }

    pub fn return_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_return())
    }
}

/// Exact per-agent models of the matrix-game dataset.
pub fn matrix_models() -> Result<Vec<EmpiricalModel>> {
    let env = matrix_game();
    let beh = matrix_game_behavior();
    (0..env.n_agents()).map(|i| exact_model_from_env(&env, &beh, i)).collect()
}

/// Fixed points of modified VI for every agent's exact model.
pub fn matrix_qtables(spec: &TransformSpec) -> Result<Vec<QTable>> {
    let cfg = LearnConfig::default().with_transform(*spec);
    matrix_models()?.iter().map(|m| modified_value_iteration(m, &cfg)).collect()
}

/// One table under `spec`; the reference values are those of `spec.mode`.
pub fn matrix_table(spec: &TransformSpec) -> Result<MatrixTable> {
    let reference = match spec.mode {
        TransformMode::None => &NONE,
        TransformMode::Vd => &VD,
        TransformMode::VdTn => &VD_TN,
        // No reference table; compare against the unmodified one.
        TransformMode::Tn => &NONE,
    };
    let cfg = LearnConfig::default().with_transform(*spec);
    let mut cells = Vec::new();
    for (agent, model) in matrix_models()?.iter().enumerate() {
        let q = modified_value_iteration(model, &cfg)?;
        for (action, want) in reference[agent].iter().enumerate() {
            let dist = modified_transitions(model, &q, matrix::START, action, cfg.gamma, spec)?;
            for &(payoff, p) in &want.probs {
                cells.push(Cell {
                    agent,
                    action,
                    label: format!("p({payoff})"),
                    computed: dist.prob(outcome_state(payoff)),
                    expected: p,
                });
            }
            cells.push(Cell {
                agent,
                action,
                label: "return".into(),
                computed: q.get(matrix::START, action),
                expected: want.ret,
            });
        }
    }
    Ok(MatrixTable { mode: spec.mode, spec: *spec, cells })
}

/// Tables for modes none, vd and vd_tn. `clip` forces clipping at the given
/// epsilon in every table.
pub fn reproduce(clip: Option<f64>) -> Result<Vec<MatrixTable>> {
    [TransformMode::None, TransformMode::Vd, TransformMode::VdTn]
        .into_iter()
        .map(|mode| {
            let spec = TransformSpec::new(mode);
            matrix_table(&clip.map_or(spec, |e| spec.clipped(e)))
        })
        .collect()
}

/// Renders the tables with a PASS/FAIL line per probability cell. Returns
/// are printed with their reference and delta. The count is of failing
/// probability cells.
pub fn render(tables: &[MatrixTable]) -> (String, usize) {
    let mut out = String::new();
    let mut failures = 0;
    for t in tables {
        let clip = if t.spec.clip_enabled {
            format!(", clipped at epsilon {}", t.spec.epsilon)
        } else {
            String::new()
        };
        let _ = writeln!(out, "== mode {}{clip} ==", t.mode);
        let _ = writeln!(out, "agent action  successor probabilities   return");
        for agent in 0..2 {
            for action in 0..2 {
                let row: Vec<&Cell> =
                    t.cells.iter().filter(|c| c.agent == agent && c.action == action).collect();
                let probs: Vec<String> = row
                    .iter()
                    .filter(|c| !c.is_return())
                    .map(|c| format!("{}={:.2}", c.label, c.computed))
                    .collect();
                let ret = row.iter().find(|c| c.is_return()).map_or(f64::NAN, |c| c.computed);
                let _ = writeln!(
                    out,
                    "{:>5} {:>6}  {:<24}{:.2}",
                    agent + 1,
                    format!("a{}", action + 1),
                    probs.join(" "),
                    ret
                );
            }
        }
        for c in t.probability_cells() {
            let ok = c.passes(CELL_TOLERANCE);
            failures += usize::from(!ok);
            let _ = writeln!(
                out,
                "{} {} agent {} a{} {}: {:.4} (reference {:.2})",
                if ok { "PASS" } else { "FAIL" },
                t.mode,
                c.agent + 1,
                c.action + 1,
                c.label,
                c.computed,
                c.expected
            );
        }
        for c in t.return_cells() {
            let _ = writeln!(
                out,
                "info {} agent {} a{} return: {:.4} (reference {:.2}, delta {:+.4})",
                t.mode,
                c.agent + 1,
                c.action + 1,
                c.computed,
                c.expected,
                c.computed - c.expected
            );
        }
        out.push('\n');
    }
    let total: usize = tables.iter().map(|t| t.probability_cells().count()).sum();
    let _ = writeln!(out, "{} of {total} probability cells pass", total - failures);
    (out, failures)
}

/// Per visited `(s, a)` of one agent: the successor support with `P_B`,
/// `lambda_tn`, `lambda_vd` and the modified probability at `q`.
pub fn inspect(
    agent: usize,
    model: &EmpiricalModel,
    q: &QTable,
    gamma: f64,
    spec: &TransformSpec,
) -> Result<String> {
    let mut out = String::from("agent,state,action,next,p_b,lambda_tn,lambda_vd,p_hat\n");
    for (s, a) in model.visited_pairs() {
        let dist = modified_transitions(model, q, s, a, gamma, spec)?;
        for e in &dist.entries {
            let _ = writeln!(
                out,
                "{agent},{s},{a},{},{:.6},{:.6},{:.6},{:.6}",
                e.next, e.prob_b, e.lambda_tn, e.lambda_vd, e.modified_prob
            );
        }
    }
    Ok(out)
}
