//! Run configuration: one TOML file with a section per stage.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/matrix"
//!
//! [env]
//! name = "matrix_game"        # matrix_game | dg | random | episodic | layered
//!
//! [behavior]
//! kind = "fixed"              # uniform | fixed
//! probabilities = [[0.8, 0.2], [0.4, 0.6]]
//!
//! [dataset]
//! episodes = 10000
//!
//! [transform]
//! mode = "vd_tn"
//!
//! [learn]
//! gamma = 0.95
//!
//! [train]
//! learner = "vi"              # vi | td
//!
//! [eval]
//! episodes = 1000
//! ```
//!
//! Every key except `seed` and `env.name` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::DEFAULT_CONSENSUS_STATES;
use crate::env::{
    discretized_dg, episodic_random_mdp, layered_random_mdp, matrix_game, random_mdp, EnvSpec,
    JointPolicy,
};
use crate::error::{Error, Result};
use crate::learner::LearnConfig;
use crate::transforms::TransformSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    MatrixGame,
    Dg,
    Random,
    Episodic,
    Layered,
}

/// Environment selection. Size parameters not used by the chosen
/// environment are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: Option<EnvName>,
    /// Generator seed of random environments; defaults to the run seed.
    pub seed: Option<u64>,
    pub n_states: Option<usize>,
    pub n_actions: Option<usize>,
    pub n_agents: Option<usize>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub horizon: Option<usize>,
    pub pos_bins: Option<usize>,
    pub act_bins: Option<usize>,
    pub layers: Option<usize>,
    pub width: Option<usize>,
}

impl EnvConfig {
    pub fn build(&self, run_seed: u64) -> Result<EnvSpec> {
        let name = self.name.ok_or_else(|| missing("env.name"))?;
        let seed = self.seed.unwrap_or(run_seed);
        let n_actions = self.n_actions.unwrap_or(2);
        let n_agents = self.n_agents.unwrap_or(2);
        let r_min = self.r_min.unwrap_or(1.0);
        let r_max = self.r_max.unwrap_or(5.0);
        let env = match name {
            EnvName::MatrixGame => return Ok(matrix_game()),
            EnvName::Dg => {
                return discretized_dg(
                    self.pos_bins.unwrap_or(21),
                    self.act_bins.unwrap_or(5),
                    self.horizon.unwrap_or(25),
                )
            }
            EnvName::Random => {
                random_mdp(self.n_states.unwrap_or(5), n_actions, n_agents, r_min, r_max, seed)?
            }
            EnvName::Episodic => {
                episodic_random_mdp(self.n_states.unwrap_or(6), n_actions, n_agents, r_min, r_max, seed)?
            }
            EnvName::Layered => layered_random_mdp(
                self.layers.unwrap_or(5),
                self.width.unwrap_or(3),
                n_actions,
                n_agents,
                r_min,
                r_max,
                seed,
            )?,
        };
        match self.horizon {
            Some(h) => env.with_horizon(Some(h)),
            // continuing MDPs need some cut-off to produce episodes
            None if name == EnvName::Random => env.with_horizon(Some(50)),
            None => Ok(env),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    #[default]
    Uniform,
    /// The same action distribution in every state, one per agent.
    Fixed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub kind: BehaviorKind,
    pub probabilities: Option<Vec<Vec<f64>>>,
}

impl BehaviorConfig {
    pub fn build(&self, env: &EnvSpec) -> Result<JointPolicy> {
        match self.kind {
            BehaviorKind::Uniform => Ok(JointPolicy::uniform(env)),
            BehaviorKind::Fixed => {
                let p = self.probabilities.as_ref().ok_or_else(|| missing("behavior.probabilities"))?;
                JointPolicy::state_independent(env, p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Directory of the per-agent dataset files; defaults to `<output>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { episodes: 1000, dir: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Modified value iteration on the empirical model.
    #[default]
    Vi,
    /// Weighted TD on the dataset records.
    Td,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learner: Learner,
    /// Affine map of the observed reward range onto `[lo, hi]` before
    /// learning. Evaluation always uses the environment's rewards.
    pub rescale: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub consensus_states: usize,
    /// Monte Carlo episodes per start state for the extrapolation error;
    /// 0 skips it.
    pub extrapolation_episodes: usize,
    /// Defaults to `<output>/results.csv`.
    pub results: Option<PathBuf>,
    /// Defaults to `<env>-<mode>-seed<seed>`.
    pub run_id: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            consensus_states: DEFAULT_CONSENSUS_STATES,
            extrapolation_episodes: 1000,
            results: None,
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub behavior: BehaviorConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub transform: TransformSpec,
    #[serde(default)]
    pub learn: LearnConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn missing(field: &str) -> Error {
    Error::invalid(format!("missing required field `{field}`"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |span| text[..span.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse { line, message: e.message().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies command-line overrides and checks every section.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.output_dir = out;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(missing("seed"));
        }
        if self.env.name.is_none() {
            return Err(missing("env.name"));
        }
        if self.output_dir.is_none() {
            return Err(missing("output_dir"));
        }
        if self.dataset.episodes == 0 {
            return Err(Error::invalid("dataset.episodes must be positive"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::invalid("eval.episodes must be positive"));
        }
        if self.eval.consensus_states == 0 {
            return Err(Error::invalid("eval.consensus_states must be positive"));
        }
        if let Some([lo, hi]) = self.train.rescale {
            if !(lo < hi) {
                return Err(Error::invalid(format!("train.rescale needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        self.learn_config().validate()
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("validated config has an output directory")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.dir.clone().unwrap_or_else(|| self.output_dir().join("data"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.eval.results.clone().unwrap_or_else(|| self.output_dir().join("results.csv"))
    }

    /// The learner settings with the transform attached and the run seed.
    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig { seed: self.seed.unwrap_or(self.learn.seed), ..self.learn }
            .with_transform(self.transform)
    }

    pub fn env(&self) -> Result<EnvSpec> {
        self.env.build(self.seed())
    }

    pub fn run_id(&self, env: &EnvSpec) -> String {
        self.eval
            .run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}-seed{}", env.name(), self.transform.mode, self.seed()))
    }
}
