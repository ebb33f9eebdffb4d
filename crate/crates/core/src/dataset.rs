//! Per-agent offline datasets.
//!
//! A [`TransitionRecord`] holds exactly one action: the owner's. Other agents'
//! actions are never stored, so the decentralized constraint holds by
//! construction rather than by convention.
//!
//! On disk a dataset is JSON Lines. The first line is a header object
//! (see [`DatasetHeader`]); every following line is one record
//! `{"s":int,"a":int,"r":float,"s2":int,"done":bool}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{env_step, sample_start, EnvSpec, JointPolicy};
use crate::error::{Error, Result};

pub const SCHEMA: &str = "offdec-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "s2")]
    pub next_state: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub behavior: String,
    pub seed: u64,
    pub episodes: usize,
    pub n_states: usize,
    pub n_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub agent_id: usize,
    #[serde(flatten)]
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDataset {
    pub agent_id: usize,
    pub records: Vec<TransitionRecord>,
    pub meta: DatasetMeta,
}

impl AgentDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every id against the declared state and action counts.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            check_record(r, &self.meta).map_err(|message| Error::Parse {
                line: i + 2,
                message,
            })?;
        }
        Ok(())
    }

    /// Splits the flat record list back into episodes using `done`.
    pub fn episodes(&self) -> impl Iterator<Item = &[TransitionRecord]> {
        self.records
            .split_inclusive(|r| r.done)
            .filter(|ep| !ep.is_empty())
    }
}

fn check_record(r: &TransitionRecord, meta: &DatasetMeta) -> std::result::Result<(), String> {
    if r.state >= meta.n_states || r.next_state >= meta.n_states {
        return Err(format!(
            "state id out of range (s={}, s2={}, n_states={})",
            r.state, r.next_state, meta.n_states
        ));
    }
    if r.action >= meta.n_actions {
        return Err(format!(
            "action {} >= declared action count {}",
            r.action, meta.n_actions
        ));
    }
    if !r.reward.is_finite() {
        return Err(format!("non-finite reward {}", r.reward));
    }
    Ok(())
}

/// Runs `n_episodes` joint episodes under `behavior` and returns one dataset
/// per agent. All datasets describe the same episodes.
pub fn collect(
    env: &EnvSpec,
    behavior: &JointPolicy,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<AgentDataset>> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be positive"));
    }
    behavior.check_covers(env)?;
    let n_agents = env.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<Vec<TransitionRecord>> = vec![Vec::new(); n_agents];
    let mut joint = vec![0; n_agents];
    // guards environments without horizon or reachable terminals
    let cap = env.horizon().unwrap_or(10_000);
    for _ in 0..n_episodes {
        let mut state = sample_start(env, &mut rng);
        if env.is_terminal(state) {
            continue;
        }
        for t in 0..cap {
            for (agent, slot) in joint.iter_mut().enumerate() {
                *slot = behavior.sample(agent, state, &mut rng);
            }
            let step = env_step(env, state, &joint, t, &mut rng)?;
            let done = step.done || t + 1 == cap;
            for (agent, recs) in records.iter_mut().enumerate() {
                recs.push(TransitionRecord {
                    state,
                    action: joint[agent],
                    reward: step.reward,
                    next_state: step.next_state,
                    done,
                });
            }
            if done {
                break;
            }
            state = step.next_state;
        }
    }
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(agent_id, records)| AgentDataset {
            agent_id,
            records,
            meta: DatasetMeta {
                env: env.name().to_string(),
                behavior: behavior.description().to_string(),
                seed,
                episodes: n_episodes,
                n_states: env.n_states(),
                n_actions: env.n_actions(agent_id),
            },
        })
        .collect())
}

pub fn write_jsonl(dataset: &AgentDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        schema: SCHEMA.to_string(),
        agent_id: dataset.agent_id,
        meta: dataset.meta.clone(),
    };
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for r in &dataset.records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<AgentDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<AgentDataset> {
    let mut lines = reader.lines().enumerate();
    let (header_no, header_text) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 1,
                message: "no header".into(),
            });
        };
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if !line.trim().is_empty() {
            break (i + 1, line);
        }
    };
    let value: serde_json::Value =
        serde_json::from_str(&header_text).map_err(|e| Error::Parse {
            line: header_no,
            message: format!("bad header: {e}"),
        })?;
    let schema = value.get("schema").and_then(|v| v.as_str()).unwrap_or("");
    if schema != SCHEMA {
        return Err(Error::Schema {
            expected: SCHEMA.into(),
            found: schema.into(),
        });
    }
    let header: DatasetHeader = serde_json::from_value(value).map_err(|e| Error::Parse {
        line: header_no,
        message: format!("bad header: {e}"),
    })?;

    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TransitionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_record(&rec, &header.meta).map_err(|message| Error::Parse {
            line: i + 1,
            message,
        })?;
        records.push(rec);
    }
    Ok(AgentDataset {
        agent_id: header.agent_id,
        records,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{matrix, matrix_game};
    use std::io::Cursor;

    fn mg_behavior(env: &EnvSpec) -> JointPolicy {
        JointPolicy::state_independent(env, &[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap()
    }

    #[test]
    fn collect_rejects_zero_episodes() {
        let env = matrix_game();
        assert!(collect(&env, &mg_behavior(&env), 0, 1).is_err());
    }

    #[test]
    fn agents_share_episodes() {
        let env = matrix_game();
        let data = collect(&env, &mg_behavior(&env), 500, 3).unwrap();
        assert_eq!(data.len(), 2);
        let strip = |d: &AgentDataset| {
            d.records
                .iter()
                .map(|r| (r.state, r.reward.to_bits(), r.next_state, r.done))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&data[0]), strip(&data[1]));
        assert_eq!(data[0].episodes().count(), 500);
        assert_eq!(data, collect(&env, &mg_behavior(&env), 500, 3).unwrap());
    }

    #[test]
    fn deterministic_behavior_gives_identical_records() {
        let env = matrix_game();
        let pol = JointPolicy::state_independent(&env, &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let data = collect(&env, &pol, 50, 9).unwrap();
        let first = data[0].records[0];
        assert!(data[0].records.iter().all(|r| *r == first));
        assert_eq!(first.next_state, matrix::OUTCOME_6);
        assert_eq!(first.reward, 6.0);
    }

    #[test]
    fn empty_input_has_no_header() {
        match parse_jsonl(Cursor::new("")) {
            Err(Error::Parse { message, .. }) => assert_eq!(message, "no header"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn header() -> String {
        r#"{"schema":"offdec-dataset/1","agent_id":0,"env":"m","behavior":"b","seed":1,"episodes":1,"n_states":4,"n_actions":2}"#.to_string()
    }

    #[test]
    fn action_out_of_range_is_rejected() {
        let text = format!(
            "{}\n{}\n{}\n",
            header(),
            r#"{"s":0,"a":1,"r":5.0,"s2":2,"done":true}"#,
            r#"{"s":0,"a":2,"r":5.0,"s2":2,"done":true}"#
        );
        match parse_jsonl(Cursor::new(text)) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("action 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{}\nnot json\n", header(), r#"{"s":0,"a":1,"r":5.0,"s2":2,"done":true}"#);
        assert!(matches!(
            parse_jsonl(Cursor::new(text)),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let text = header().replace("offdec-dataset/1", "offdec-dataset/0");
        assert!(matches!(
            parse_jsonl(Cursor::new(text)),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let env = matrix_game();
        let data = collect(&env, &mg_behavior(&env), 200, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent0.jsonl");
        write_jsonl(&data[0], &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), data[0]);
        let text = std::fs::read_to_string(&path).unwrap();
        let second = text.lines().nth(1).unwrap();
        assert!(second.starts_with(r#"{"s":0,"a":"#), "{second}");
    }
}
