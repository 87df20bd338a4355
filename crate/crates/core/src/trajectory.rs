//! Domain types shared across the pipeline: instructions, thoughts, actions,
//! observations, histories and trajectories.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::count_tokens;
use crate::policy::{PolicyError, ScorablePolicy, StepSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("action is empty after normalization")]
    EmptyAction,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("step {step} has no observation but is not the final step")]
    MissingObservation { step: usize },
    #[error("step {step}: deliberation flag, thought kind and candidate count disagree")]
    InconsistentDeliberation { step: usize },
    #[error("iteration must be at least 1, got {0}")]
    InvalidIteration(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

/// Task instruction `u`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub split: Split,
}

impl Instruction {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        split: Split,
    ) -> Result<Self, TrajectoryError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TrajectoryError::EmptyInstruction);
        }
        Ok(Self {
            id: id.into(),
            text,
            split,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtKind {
    Plain,
    Deliberative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thought {
    pub text: String,
    pub kind: ThoughtKind,
}

impl Thought {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: ThoughtKind::Plain,
        }
    }

    pub fn deliberative(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            kind: ThoughtKind::Deliberative,
        }
    }

    pub fn empty() -> Self {
        Self::plain("")
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// An agent action. Two actions are equal when their canonical forms are.
#[derive(Debug, Clone, Eq)]
pub struct Action {
    raw: String,
    canonical: String,
}

/// Normalizes a surface action string: trim, collapse whitespace runs,
/// lowercase and drop trailing periods.
pub fn canonicalize(raw: &str) -> Result<Action, TrajectoryError> {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut canonical = collapsed.to_lowercase();
    canonical.truncate(canonical.trim_end_matches(['.', ' ']).len());
    if canonical.is_empty() {
        return Err(TrajectoryError::EmptyAction);
    }
    Ok(Action {
        raw: raw.to_string(),
        canonical,
    })
}

impl Action {
    pub fn parse(raw: &str) -> Result<Self, TrajectoryError> {
        canonicalize(raw)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }
}

impl PartialEq for Action {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl Hash for Action {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical.hash(state);
    }
}

impl PartialOrd for Action {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Action {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub String);

impl Observation {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub thought: Thought,
    pub action: Action,
    pub observation: Option<Observation>,
}

impl Step {
    pub fn new(thought: Thought, action: Action, observation: Option<Observation>) -> Self {
        Self {
            thought,
            action,
            observation,
        }
    }

    pub fn sample(&self) -> StepSample {
        StepSample {
            thought: self.thought.clone(),
            action: self.action.clone(),
        }
    }
}

/// Interaction history `h_t`: the instruction, the environment's opening
/// observation and every step taken so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    pub instruction: Instruction,
    pub initial_observation: Option<Observation>,
    pub steps: Vec<Step>,
}

impl History {
    pub fn new(instruction: Instruction, initial_observation: Option<Observation>) -> Self {
        Self {
            instruction,
            initial_observation,
            steps: Vec::new(),
        }
    }

    /// The expert history before step `index` (zero-based) of `e`.
    pub fn expert_prefix(
        e: &Trajectory,
        initial_observation: Option<Observation>,
        index: usize,
    ) -> Self {
        Self {
            instruction: e.instruction().clone(),
            initial_observation,
            steps: e.steps()[..index.min(e.len())].to_vec(),
        }
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Canonical action sequence; the state key used by tabular policies.
    pub fn action_key(&self) -> Vec<String> {
        self.steps
            .iter()
            .map(|s| s.action.canonical().to_string())
            .collect()
    }
}

/// A complete episode `e` under one instruction with its terminal reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    instruction: Instruction,
    steps: Vec<Step>,
    reward: f64,
    token_count: usize,
}

impl Trajectory {
    pub fn new(
        instruction: Instruction,
        steps: Vec<Step>,
        reward: f64,
    ) -> Result<Self, TrajectoryError> {
        if steps.is_empty() {
            return Err(TrajectoryError::EmptyTrajectory);
        }
        check_reward(reward)?;
        let last = steps.len() - 1;
        if let Some(step) = steps[..last].iter().position(|s| s.observation.is_none()) {
            return Err(TrajectoryError::MissingObservation { step });
        }
        let token_count = steps
            .iter()
            .map(|s| count_tokens(&s.thought.text) + count_tokens(s.action.raw()))
            .sum();
        Ok(Self {
            instruction,
            steps,
            reward,
            token_count,
        })
    }

    pub fn id(&self) -> &str {
        &self.instruction.id
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    /// Number of steps `L`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }
}

pub fn step_count(e: &Trajectory) -> usize {
    e.len()
}

fn check_reward(reward: f64) -> Result<(), TrajectoryError> {
    if (0.0..=1.0).contains(&reward) {
        Ok(())
    } else {
        Err(TrajectoryError::RewardOutOfRange(reward))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliberationStep {
    pub thought: Thought,
    pub action: Action,
    pub observation: Option<Observation>,
    deliberated: bool,
    candidate_count: usize,
}

impl DeliberationStep {
    /// A step whose deliberation flag follows from `candidate_count`. The
    /// thought kind must agree with it.
    pub fn new(
        thought: Thought,
        action: Action,
        observation: Option<Observation>,
        candidate_count: usize,
    ) -> Result<Self, TrajectoryError> {
        let deliberated = candidate_count >= 2;
        if deliberated != (thought.kind == ThoughtKind::Deliberative) {
            return Err(TrajectoryError::InconsistentDeliberation { step: 0 });
        }
        Ok(Self {
            thought,
            action,
            observation,
            deliberated,
            candidate_count,
        })
    }

    /// Copies an expert step verbatim.
    pub fn plain(step: &Step, candidate_count: usize) -> Self {
        Self {
            thought: Thought::plain(step.thought.text.clone()),
            action: step.action.clone(),
            observation: step.observation.clone(),
            deliberated: false,
            candidate_count: candidate_count.min(1),
        }
    }

    pub fn deliberated(&self) -> bool {
        self.deliberated
    }

    pub fn candidate_count(&self) -> usize {
        self.candidate_count
    }

    pub fn to_step(&self) -> Step {
        Step::new(
            self.thought.clone(),
            self.action.clone(),
            self.observation.clone(),
        )
    }
}

/// A self-augmented deliberation trajectory produced by one synthesis pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliberationTrajectory {
    instruction: Instruction,
    steps: Vec<DeliberationStep>,
    source_trajectory_id: String,
    iteration: u32,
    reward: f64,
}

impl DeliberationTrajectory {
    pub fn new(
        instruction: Instruction,
        steps: Vec<DeliberationStep>,
        source_trajectory_id: impl Into<String>,
        iteration: u32,
        reward: f64,
    ) -> Result<Self, TrajectoryError> {
        if steps.is_empty() {
            return Err(TrajectoryError::EmptyTrajectory);
        }
        if iteration < 1 {
            return Err(TrajectoryError::InvalidIteration(iteration));
        }
        check_reward(reward)?;
        let last = steps.len() - 1;
        for (i, s) in steps.iter().enumerate() {
            if i < last && s.observation.is_none() {
                return Err(TrajectoryError::MissingObservation { step: i });
            }
            let kind_flag = s.thought.kind == ThoughtKind::Deliberative;
            if s.deliberated != kind_flag || s.deliberated != (s.candidate_count >= 2) {
                return Err(TrajectoryError::InconsistentDeliberation { step: i });
            }
        }
        Ok(Self {
            instruction,
            steps,
            source_trajectory_id: source_trajectory_id.into(),
            iteration,
            reward,
        })
    }

    pub fn instruction(&self) -> &Instruction {
        &self.instruction
    }

    pub fn steps(&self) -> &[DeliberationStep] {
        &self.steps
    }

    pub fn source_trajectory_id(&self) -> &str {
        &self.source_trajectory_id
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn deliberated_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.deliberated).count()
    }

    /// The plain trajectory view, used when this dataset becomes the expert
    /// data of the next iteration.
    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory::new(
            self.instruction.clone(),
            self.steps.iter().map(DeliberationStep::to_step).collect(),
            self.reward,
        )
        .expect("deliberation trajectory invariants imply trajectory invariants")
    }
}

/// Log-probability of one step or a whole trajectory. `OffSupport` marks a
/// zero-probability event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogProb {
    Finite(f64),
    OffSupport,
}

impl LogProb {
    pub fn value(self) -> f64 {
        match self {
            LogProb::Finite(v) => v,
            LogProb::OffSupport => f64::NEG_INFINITY,
        }
    }

    pub fn prob(self) -> f64 {
        self.value().exp()
    }
}

impl std::ops::Add for LogProb {
    type Output = LogProb;

    fn add(self, rhs: LogProb) -> LogProb {
        match (self, rhs) {
            (LogProb::Finite(a), LogProb::Finite(b)) => LogProb::Finite(a + b),
            _ => LogProb::OffSupport,
        }
    }
}

/// `log pi(e | u) = sum_t log pi(z_t, a_t | h_{t-1})`.
pub fn trajectory_log_prob(p: &dyn ScorablePolicy, e: &Trajectory) -> Result<LogProb, PolicyError> {
    let mut history = History::new(e.instruction().clone(), None);
    let mut total = LogProb::Finite(0.0);
    for step in e.steps() {
        total = total + p.score_step(&history, &step.sample())?;
        history.push(step.clone());
    }
    Ok(total)
}
