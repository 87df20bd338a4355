//! Agent policies (`pi_theta`, `pi_k`) and the frozen base model used for
//! critiques and synthesis.
//!
//! Local backends are deterministic given a seed; the remote backend talks to
//! an OpenAI-compatible chat-completion endpoint.

pub mod remote;
pub mod scripted;
pub mod stub;
pub mod tabular;

use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::exec::derive_seed;
use crate::metrics::is_deliberative_text;
use crate::trajectory::{
    Action, History, LogProb, Step, Thought, ThoughtKind, Trajectory, TrajectoryError,
};

pub use remote::{ChatMessage, RemoteChatClient, RemoteChatConfig};
pub use scripted::ScriptedPolicy;
pub use stub::{TemplateStubBase, TemplateStubPolicy};
pub use tabular::{Distribution, TabularPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy unavailable: {0}")]
    PolicyUnavailable(String),
    #[error("script for {id:?} exhausted at step {index}")]
    ScriptExhausted { id: String, index: usize },
    #[error("policy cannot score steps: {0}")]
    Unscorable(String),
    #[error("no distribution for state {0:?}")]
    UnknownState(Vec<String>),
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("could not parse model output: {0}")]
    Parse(String),
}

/// One `(thought, action)` draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSample {
    pub thought: Thought,
    pub action: Action,
}

impl StepSample {
    pub fn new(thought: Thought, action: Action) -> Self {
        Self { thought, action }
    }

    pub fn action_only(action: Action) -> Self {
        Self {
            thought: Thought::empty(),
            action,
        }
    }
}

pub trait Policy: Send + Sync {
    fn sample_step(&self, h: &History, temperature: f64, seed: u64)
        -> Result<StepSample, PolicyError>;

    fn as_scorable(&self) -> Option<&dyn ScorablePolicy> {
        None
    }
}

/// Policies exposing `log pi(z_t, a_t | h_{t-1})`.
pub trait ScorablePolicy: Send + Sync {
    fn score_step(&self, h: &History, s: &StepSample) -> Result<LogProb, PolicyError>;
}

/// Frozen base model: plain text completion.
pub trait BaseModel: Send + Sync {
    fn complete_text(&self, prompt: &str, temperature: f64) -> Result<String, PolicyError>;
}

pub fn score_step(p: &dyn Policy, h: &History, s: &StepSample) -> Result<LogProb, PolicyError> {
    p.as_scorable()
        .ok_or_else(|| PolicyError::Unscorable("backend exposes no step probabilities".into()))?
        .score_step(h, s)
}

/// Splits a model turn of the form `Thought: ... Action: ...`. An
/// action-only turn is a plain step with an empty thought.
pub fn parse_model_step(text: &str) -> Result<StepSample, PolicyError> {
    let idx = text
        .rfind("Action:")
        .ok_or_else(|| PolicyError::Parse("no \"Action:\" line".into()))?;
    let action_text = text[idx + "Action:".len()..]
        .lines()
        .next()
        .unwrap_or_default();
    let action = Action::parse(action_text)
        .map_err(|_| PolicyError::Parse("empty action".into()))?;
    let head = &text[..idx];
    let thought_text = match head.find("Thought:") {
        Some(t) => head[t + "Thought:".len()..].trim().to_string(),
        None => String::new(),
    };
    let kind = if is_deliberative_text(&thought_text) {
        ThoughtKind::Deliberative
    } else {
        ThoughtKind::Plain
    };
    Ok(StepSample {
        thought: Thought {
            text: thought_text,
            kind,
        },
        action,
    })
}

/// Renders an assistant turn the way the environment prompts ask for it.
pub fn render_model_step(thought: &Thought, action: &Action) -> String {
    if thought.is_empty() {
        format!("Action: {}", action.raw())
    } else {
        format!("Thought: {}\nAction: {}", thought.text, action.raw())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl RunError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, RunError::Policy(PolicyError::PolicyUnavailable(_)))
    }
}

/// Runs the policy at temperature 0 from history `h` until the environment
/// terminates. The returned trajectory includes the steps already in `h`.
pub fn greedy_rollout(
    p: &dyn Policy,
    env: &mut dyn Environment,
    h: History,
    seed: u64,
) -> Result<Trajectory, RunError> {
    run_episode(p, env, h, 0.0, seed)
}

/// Same as [`greedy_rollout`] at an arbitrary sampling temperature.
pub fn run_episode(
    p: &dyn Policy,
    env: &mut dyn Environment,
    mut h: History,
    temperature: f64,
    seed: u64,
) -> Result<Trajectory, RunError> {
    while !env.terminated() {
        let sample = p.sample_step(&h, temperature, derive_seed(seed, &[h.len() as u64]))?;
        let outcome = env.step(&sample.action)?;
        h.push(Step::new(sample.thought, sample.action, Some(outcome.observation)));
    }
    let reward = env.score()?;
    Ok(Trajectory::new(h.instruction, h.steps, reward)?)
}
