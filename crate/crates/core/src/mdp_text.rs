//! Plain-text MDP format shared by environments and empirical models.
//!
//! ```text
//! offdec-mdp 1
//! name matrix_game
//! actions 2 2
//! states 4
//! horizon 1
//! initial 0:1
//! reward 0 0
//! reward 1 1
//! terminal 1 2 3
//! row 0 0 1:1
//! row 0 1 2:1
//! ```
//!
//! `actions` lists the action count of every agent; `row s j` gives the
//! next-state distribution of state `s` under joint action `j` (agent 0 most
//! significant) as sparse `state:probability` pairs in increasing state
//! order. `horizon` is a positive integer or `none`. Rows of terminal states
//! are omitted. Reals are written in the shortest form that parses back to
//! the identical `f64`, so a write/parse cycle is bit-exact.

use std::fmt::Write as _;

use crate::env::{Categorical, EnvParts, EnvSpec};
use crate::error::{Error, Result};

pub const MAGIC: &str = "offdec-mdp";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MdpDocument {
    pub name: String,
    pub actions_per_agent: Vec<usize>,
    pub n_states: usize,
    pub horizon: Option<usize>,
    pub initial: Categorical,
    pub rewards: Vec<(usize, f64)>,
    pub terminals: Vec<usize>,
    pub rows: Vec<(usize, usize, Categorical)>,
}

fn write_pairs(out: &mut String, pairs: &[(usize, f64)]) {
    for (s, p) in pairs {
        let _ = write!(out, " {s}:{p}");
    }
}

impl MdpDocument {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "name {}", self.name);
        let actions: Vec<String> = self.actions_per_agent.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(out, "actions {}", actions.join(" "));
        let _ = writeln!(out, "states {}", self.n_states);
        match self.horizon {
            Some(h) => {
                let _ = writeln!(out, "horizon {h}");
            }
            None => out.push_str("horizon none\n"),
        }
        out.push_str("initial");
        write_pairs(&mut out, &self.initial);
        out.push('\n');
        for (s, r) in &self.rewards {
            let _ = writeln!(out, "reward {s} {r}");
        }
        out.push_str("terminal");
        for s in &self.terminals {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
        for (s, j, row) in &self.rows {
            let _ = write!(out, "row {s} {j}");
            write_pairs(&mut out, row);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let perr = |line: usize, message: String| Error::Parse { line, message };

        let (line, header) = lines.next().ok_or_else(|| perr(0, "empty document".into()))?;
        let mut it = header.split_whitespace();
        if it.next() != Some(MAGIC) {
            return Err(perr(line, format!("missing `{MAGIC}` header")));
        }
        let found = it.next().unwrap_or("");
        if found != VERSION.to_string() {
            return Err(Error::Schema {
                expected: format!("{MAGIC} {VERSION}"),
                found: format!("{MAGIC} {found}"),
            });
        }

        let mut doc = MdpDocument {
            name: String::new(),
            actions_per_agent: Vec::new(),
            n_states: 0,
            horizon: None,
            initial: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            rows: Vec::new(),
        };

        fn num<T: std::str::FromStr>(line: usize, tok: Option<&str>, what: &str) -> Result<T> {
            let tok = tok.ok_or_else(|| Error::Parse {
                line,
                message: format!("missing {what}"),
            })?;
            tok.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad {what} `{tok}`"),
            })
        }

        fn pairs<'a>(line: usize, toks: impl Iterator<Item = &'a str>) -> Result<Categorical> {
            toks.map(|t| {
                let (s, p) = t.split_once(':').ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected state:probability, got `{t}`"),
                })?;
                Ok((num(line, Some(s), "state")?, num(line, Some(p), "probability")?))
            })
            .collect()
        }

        for (line, text) in lines {
            let mut toks = text.split_whitespace();
            let key = toks.next().unwrap_or_default();
            match key {
                "name" => doc.name = toks.collect::<Vec<_>>().join(" "),
                "actions" => {
                    doc.actions_per_agent = toks
                        .map(|t| num(line, Some(t), "action count"))
                        .collect::<Result<_>>()?
                }
                "states" => doc.n_states = num(line, toks.next(), "state count")?,
                "horizon" => {
                    doc.horizon = match toks.next() {
                        Some("none") => None,
                        t => Some(num(line, t, "horizon")?),
                    }
                }
                "initial" => doc.initial = pairs(line, toks)?,
                "reward" => {
                    let s = num(line, toks.next(), "state")?;
                    let r = num(line, toks.next(), "reward")?;
                    doc.rewards.push((s, r));
                }
                "terminal" => {
                    doc.terminals = toks
                        .map(|t| num(line, Some(t), "state"))
                        .collect::<Result<_>>()?
                }
                "row" => {
                    let s = num(line, toks.next(), "state")?;
                    let j = num(line, toks.next(), "joint action")?;
                    doc.rows.push((s, j, pairs(line, toks)?));
                }
                other => return Err(perr(line, format!("unknown key `{other}`"))),
            }
        }
        Ok(doc)
    }
}

impl EnvSpec {
    pub fn to_document(&self) -> MdpDocument {
        let mut rows = Vec::new();
        for s in 0..self.n_states() {
            if self.is_terminal(s) {
                continue;
            }
            for j in 0..self.n_joint() {
                rows.push((s, j, self.row(s, j).to_vec()));
            }
        }
        MdpDocument {
            name: self.name().to_string(),
            actions_per_agent: self.actions_per_agent().to_vec(),
            n_states: self.n_states(),
            horizon: self.horizon(),
            initial: self.initial().to_vec(),
            rewards: self.rewards().iter().copied().enumerate().collect(),
            terminals: self.terminals().collect(),
            rows,
        }
    }

    pub fn to_text(&self) -> String {
        self.to_document().to_text()
    }

    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        let n = doc.n_states;
        let n_joint: usize = doc.actions_per_agent.iter().product();
        let mut reward = vec![None; n];
        for (s, r) in doc.rewards {
            *reward
                .get_mut(s)
                .ok_or_else(|| Error::invalid(format!("reward for unknown state {s}")))? = Some(r);
        }
        let reward = reward
            .into_iter()
            .enumerate()
            .map(|(s, r)| r.ok_or_else(|| Error::invalid(format!("state {s} has no reward"))))
            .collect::<Result<Vec<_>>>()?;
        let mut terminal = vec![false; n];
        for s in doc.terminals {
            *terminal
                .get_mut(s)
                .ok_or_else(|| Error::invalid(format!("unknown terminal state {s}")))? = true;
        }
        let mut transitions = vec![Vec::new(); n * n_joint];
        let mut seen = vec![false; n * n_joint];
        for (s, j, row) in doc.rows {
            if s >= n || j >= n_joint {
                return Err(Error::invalid(format!("row ({s}, {j}) out of range")));
            }
            if std::mem::replace(&mut seen[s * n_joint + j], true) {
                return Err(Error::invalid(format!("duplicate row ({s}, {j})")));
            }
            transitions[s * n_joint + j] = row;
        }
        EnvSpec::new(EnvParts {
            name: doc.name,
            actions_per_agent: doc.actions_per_agent,
            n_states: n,
            transitions,
            reward,
            terminal,
            initial: doc.initial,
            horizon: doc.horizon,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_document(MdpDocument::parse(text)?)
    }
}
