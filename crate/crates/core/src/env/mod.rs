//! Episodic environment contract, task specifications and prefix replay.

pub mod remote;
pub mod textgrid;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Action, Instruction, Observation, Trajectory};

pub use remote::{RemoteEnv, RemoteEnvBackend};
pub use textgrid::{TextGrid, TextGridEnv, WorldState};

/// Observation returned for any action the environment cannot execute.
pub const NOTHING_HAPPENED: &str = "Nothing happened";

pub const DEFAULT_MAX_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("episode already terminated")]
    EpisodeClosed,
    #[error("episode still running")]
    EpisodeOpen,
    #[error("replay diverged at step {step}: expected {expected:?}, got {actual:?}")]
    ReplayDivergence {
        step: usize,
        expected: String,
        actual: String,
    },
    #[error("prefix length {t} out of range for trajectory of {len} steps")]
    PrefixOutOfRange { t: usize, len: usize },
    #[error("environment timed out: {0}")]
    EnvTimeout(String),
    #[error("environment protocol error: {0}")]
    ProtocolError(String),
    #[error("task file: {0}")]
    TaskFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Binary,
    Granular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgoal {
    /// Target object seen or held.
    Locate,
    /// Target object in the inventory.
    Hold,
    Examine,
    Focus,
    /// Target object put on the target receptacle.
    Place,
}

impl Subgoal {
    pub fn is_intermediate(self) -> bool {
        matches!(self, Subgoal::Examine | Subgoal::Focus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub object: String,
    pub receptacle: String,
    /// Intermediate states that must hold besides placement.
    #[serde(default)]
    pub requires: Vec<Subgoal>,
    /// Granular-mode subgoal weights; must sum to 1.
    #[serde(default)]
    pub weights: BTreeMap<Subgoal, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub instruction: Instruction,
    pub world_seed: u64,
    pub goal: Goal,
    pub reward_mode: RewardMode,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl TaskSpec {
    pub fn id(&self) -> &str {
        &self.instruction.id
    }

    /// Structural checks that do not depend on a concrete world.
    pub fn validate_shape(&self) -> Result<(), EnvError> {
        if self.max_steps == 0 {
            return Err(EnvError::InvalidTask("max_steps must be at least 1".into()));
        }
        if self.instruction.text.trim().is_empty() {
            return Err(EnvError::InvalidTask("empty instruction".into()));
        }
        if let Some(bad) = self.goal.requires.iter().find(|s| !s.is_intermediate()) {
            return Err(EnvError::InvalidTask(format!(
                "{bad:?} is not an intermediate requirement"
            )));
        }
        let weights = &self.goal.weights;
        if self.reward_mode == RewardMode::Granular && weights.is_empty() {
            return Err(EnvError::InvalidTask(
                "granular tasks need subgoal weights".into(),
            ));
        }
        if !weights.is_empty() {
            for (sub, w) in weights {
                let allowed = matches!(sub, Subgoal::Locate | Subgoal::Hold | Subgoal::Place)
                    || self.goal.requires.contains(sub);
                if !allowed {
                    return Err(EnvError::InvalidTask(format!(
                        "weight for {sub:?} which the goal does not require"
                    )));
                }
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(EnvError::InvalidTask(format!("bad weight {w} for {sub:?}")));
                }
            }
            let total: f64 = weights.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(EnvError::InvalidTask(format!(
                    "subgoal weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Loads a task file: one JSON record per line.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, EnvError> {
    let text = fs::read_to_string(path)
        .map_err(|e| EnvError::TaskFile(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<TaskSpec>(line)
                .map_err(|e| EnvError::TaskFile(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_tasks(path: &Path, tasks: &[TaskSpec]) -> std::io::Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task specs serialize"));
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvOutcome {
    pub observation: Observation,
    pub done: bool,
    /// Present iff `done`.
    pub reward_if_done: Option<f64>,
}

/// One live episode.
pub trait Environment: Send {
    fn step(&mut self, action: &Action) -> Result<EnvOutcome, EnvError>;

    /// Final task score in `[0, 1]`; only valid after termination.
    fn score(&mut self) -> Result<f64, EnvError>;

    fn terminated(&self) -> bool;

    fn steps_taken(&self) -> usize;

    fn max_steps(&self) -> usize;

    /// Full world state, when the backend exposes one.
    fn snapshot(&self) -> Option<WorldState> {
        None
    }
}

/// Creates episodes for task specs.
pub trait EnvBackend: Send + Sync {
    fn reset(&self, spec: &TaskSpec) -> Result<(Box<dyn Environment>, Observation), EnvError>;
}

/// An environment advanced along an expert prefix.
pub struct Replayed {
    pub env: Box<dyn Environment>,
    pub initial_observation: Observation,
}

/// Resets and replays the first `t` actions of `e`, checking every observation
/// against the recorded one.
pub fn replay_prefix(
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
    t: usize,
) -> Result<Replayed, EnvError> {
    if t >= e.len() {
        return Err(EnvError::PrefixOutOfRange { t, len: e.len() });
    }
    let (mut env, initial_observation) = backend.reset(spec)?;
    for (i, step) in e.steps()[..t].iter().enumerate() {
        let outcome = env.step(&step.action).map_err(|err| match err {
            EnvError::EpisodeClosed => EnvError::ReplayDivergence {
                step: i,
                expected: step
                    .observation
                    .as_ref()
                    .map(|o| o.0.clone())
                    .unwrap_or_default(),
                actual: "<episode closed>".into(),
            },
            other => other,
        })?;
        if let Some(expected) = &step.observation {
            if expected != &outcome.observation {
                return Err(EnvError::ReplayDivergence {
                    step: i,
                    expected: expected.0.clone(),
                    actual: outcome.observation.0,
                });
            }
        }
    }
    Ok(Replayed {
        env,
        initial_observation,
    })
}

/// Replays every action of `e`, verifying observations, and returns the
/// environment's final score when the episode terminated.
pub fn replay_full(
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
) -> Result<Option<f64>, EnvError> {
    let (mut env, _) = backend.reset(spec)?;
    for (i, step) in e.steps().iter().enumerate() {
        if env.terminated() {
            return Err(EnvError::ReplayDivergence {
                step: i,
                expected: step
                    .observation
                    .as_ref()
                    .map(|o| o.0.clone())
                    .unwrap_or_default(),
                actual: "<episode closed>".into(),
            });
        }
        let outcome = env.step(&step.action)?;
        if let Some(expected) = &step.observation {
            if expected != &outcome.observation {
                return Err(EnvError::ReplayDivergence {
                    step: i,
                    expected: expected.0.clone(),
                    actual: outcome.observation.0,
                });
            }
        }
    }
    if env.terminated() {
        Ok(Some(env.score()?))
    } else {
        Ok(None)
    }
}
