use std::fmt::Write as _;

use crate::empirical::EmpiricalModel;
use crate::error::{Error, Result};

/// Per-agent state-action values. Only in-support pairs (those the agent's
/// dataset visited) carry values; maximizations skip the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl QTable {
    /// Every in-support entry set to `init`.
    pub fn filled(model: &EmpiricalModel, init: f64) -> Self {
        let n_states = model.n_states();
        let n_actions = model.n_actions();
        let mask: Vec<bool> = (0..n_states)
            .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
            .map(|(s, a)| model.is_visited(s, a))
            .collect();
        let values = mask.iter().map(|&m| if m { init } else { 0.0 }).collect();
        Self {
            n_states,
            n_actions,
            values,
            mask,
        }
    }

    pub fn zeros(model: &EmpiricalModel) -> Self {
        Self::filled(model, 0.0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn in_support(&self, state: usize, action: usize) -> bool {
        self.mask[state * self.n_actions + action]
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        debug_assert!(self.in_support(state, action));
        self.values[state * self.n_actions + action] = value;
    }

    pub(crate) fn get_mut(&mut self, state: usize, action: usize) -> &mut f64 {
        &mut self.values[state * self.n_actions + action]
    }

    /// `max_a Q(s, a)` over in-support actions, `None` if there are none.
    pub fn state_value(&self, state: usize) -> Option<f64> {
        self.greedy_action(state).map(|a| self.get(state, a))
    }

    /// V*(s), with states that have no in-support action valued at zero.
    pub fn value_or_zero(&self, state: usize) -> f64 {
        self.state_value(state).unwrap_or(0.0)
    }

    /// Maximizing in-support action; ties go to the lowest index.
    pub fn greedy_action(&self, state: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..self.n_actions {
            if !self.in_support(state, a) {
                continue;
            }
            let q = self.get(state, a);
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((a, q));
            }
        }
        best.map(|(a, _)| a)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_states)
            .flat_map(move |s| (0..self.n_actions).map(move |a| (s, a)))
            .filter(|&(s, a)| self.in_support(s, a))
            .map(|(s, a)| (s, a, self.get(s, a)))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().map(|(_, _, q)| q.abs()).fold(0.0, f64::max)
    }

    /// Sup-norm distance over in-support entries. Both tables must share a mask.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        assert_eq!(self.mask, other.mask, "q-tables have different supports");
        self.values
            .iter()
            .zip(&other.values)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `state,action,q`, one row per in-support entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,action,q\n");
        for (s, a, q) in self.entries() {
            let _ = writeln!(out, "{s},{a},{q}");
        }
        out
    }

    /// Inverse of [`QTable::to_csv`]; pairs absent from the file are out of support.
    pub fn from_csv(text: &str, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "state,action,q" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header `state,action,q`".into(),
                })
            }
        }
        let mut table = Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            mask: vec![false; n_states * n_actions],
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [s, a, q] = cols[..] else {
                return Err(perr(format!("expected 3 columns, got {}", cols.len())));
            };
            let s: usize = s.parse().map_err(|_| perr(format!("bad state `{s}`")))?;
            let a: usize = a.parse().map_err(|_| perr(format!("bad action `{a}`")))?;
            let q: f64 = q.parse().map_err(|_| perr(format!("bad value `{q}`")))?;
            if s >= n_states || a >= n_actions {
                return Err(perr(format!("entry ({s}, {a}) out of range")));
            }
            table.mask[s * n_actions + a] = true;
            table.values[s * n_actions + a] = q;
        }
        Ok(table)
    }
}
