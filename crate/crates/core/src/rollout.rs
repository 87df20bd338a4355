//! Branch rollouts: execute a candidate action from an expert prefix and let
//! the policy continue until the episode ends.

use indexmap::IndexMap;
use thiserror::Error;

use crate::env::{replay_prefix, EnvBackend, TaskSpec};
use crate::exec::{derive_seed, Execution};
use crate::policy::{Policy, RunError, StepSample};
use crate::sampler::{needs_deliberation, CandidateSet};
use crate::trajectory::{Action, History, Step, Trajectory};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("step {t} out of range for trajectory of {len} steps")]
    OutOfRange { t: usize, len: usize },
    #[error("candidate set at step {0} does not need deliberation")]
    NotFlagged(usize),
    #[error("rollout of {action:?}: {source}")]
    Run { action: String, source: RunError },
}

impl RolloutError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, RolloutError::Run { source, .. } if source.is_unavailable())
    }
}

/// A candidate's executed continuation `e_t` and its final reward `r_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub candidate: StepSample,
    /// Steps from the branch point on; the first one is the candidate's.
    pub continuation: Vec<Step>,
    pub final_reward: f64,
    /// The episode ended by exhausting the step budget.
    pub truncated: bool,
    pub is_expert_tail: bool,
}

/// Replays `e`'s first `t` actions, takes `candidate`, then samples the
/// policy at `temperature` until the episode terminates.
#[allow(clippy::too_many_arguments)]
pub fn execute(
    p: &dyn Policy,
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
    t: usize,
    candidate: &StepSample,
    temperature: f64,
    seed: u64,
) -> Result<RolloutRecord, RolloutError> {
    if t >= e.len() {
        return Err(RolloutError::OutOfRange { t, len: e.len() });
    }
    let wrap = |source: RunError| RolloutError::Run {
        action: candidate.action.canonical().to_string(),
        source,
    };
    let replayed = replay_prefix(backend, spec, e, t).map_err(|err| wrap(err.into()))?;
    let mut env = replayed.env;
    let mut h = History::expert_prefix(e, Some(replayed.initial_observation), t);
    let mut continuation = Vec::new();
    let mut next = candidate.clone();
    loop {
        let outcome = env.step(&next.action).map_err(|err| wrap(err.into()))?;
        let step = Step::new(next.thought, next.action, Some(outcome.observation));
        continuation.push(step.clone());
        h.push(step);
        if env.terminated() {
            break;
        }
        next = p
            .sample_step(&h, temperature, derive_seed(seed, &[continuation.len() as u64]))
            .map_err(|err| wrap(err.into()))?;
    }
    let final_reward = env.score().map_err(|err| wrap(err.into()))?;
    Ok(RolloutRecord {
        candidate: candidate.clone(),
        continuation,
        final_reward,
        truncated: env.steps_taken() >= env.max_steps(),
        is_expert_tail: false,
    })
}

/// The expert's own remainder from step `t`, grounded by the stored reward.
pub fn expert_tail(e: &Trajectory, t: usize) -> Result<RolloutRecord, RolloutError> {
    if t >= e.len() {
        return Err(RolloutError::OutOfRange { t, len: e.len() });
    }
    Ok(RolloutRecord {
        candidate: e.steps()[t].sample(),
        continuation: e.steps()[t..].to_vec(),
        final_reward: e.reward(),
        truncated: false,
        is_expert_tail: true,
    })
}

/// One record per distinct action of a flagged candidate set. The expert
/// action is grounded by its demonstrated tail unless `reroll_expert` asks
/// for a fresh rollout.
#[allow(clippy::too_many_arguments)]
pub fn rollout_unique(
    p: &dyn Policy,
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
    c: &CandidateSet,
    temperature: f64,
    seed: u64,
    reroll_expert: bool,
    exec: Execution,
) -> Result<IndexMap<Action, RolloutRecord>, RolloutError> {
    if !needs_deliberation(c) {
        return Err(RolloutError::NotFlagged(c.step_index));
    }
    let t = c.step_index;
    let actions: Vec<&Action> = c.unique_actions.iter().map(|(a, _)| a).collect();
    let records = exec.map(&actions, |i, action| {
        if **action == c.expert.action && !reroll_expert {
            return expert_tail(e, t);
        }
        let candidate = c
            .representative(action)
            .expect("unique actions come from the candidate set");
        execute(p, backend, spec, e, t, candidate, temperature, derive_seed(seed, &[i as u64]))
    });
    actions
        .into_iter()
        .zip(records)
        .map(|(a, r)| r.map(|r| (a.clone(), r)))
        .collect()
}
