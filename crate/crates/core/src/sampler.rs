//! Self-consistency action sampling along an expert trajectory and the
//! inconsistency indicator that decides when a step needs deliberation.

use indexmap::IndexMap;
use thiserror::Error;

use crate::env::{EnvBackend, EnvError, TaskSpec};
use crate::exec::derive_seed;
use crate::policy::{Policy, PolicyError, StepSample};
use crate::trajectory::{Action, History, Observation, Step, Thought, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("step {step}: {source}")]
    Policy { step: usize, source: PolicyError },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// The expert action plus `N` policy draws at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub step_index: usize,
    pub expert: StepSample,
    pub sampled: Vec<StepSample>,
    /// Distinct canonical actions over all `N + 1` candidates, in order of
    /// first appearance (sampled draws first, then the expert), with counts.
    pub unique_actions: Vec<(Action, usize)>,
}

impl CandidateSet {
    pub fn new(step_index: usize, expert: StepSample, sampled: Vec<StepSample>) -> Self {
        let mut counts: IndexMap<Action, usize> = IndexMap::new();
        for a in sampled.iter().map(|s| &s.action).chain([&expert.action]) {
            *counts.entry(a.clone()).or_insert(0) += 1;
        }
        Self {
            step_index,
            expert,
            sampled,
            unique_actions: counts.into_iter().collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.sampled.len()
    }

    pub fn unique_count(&self) -> usize {
        self.unique_actions.len()
    }

    /// The first sampled draw carrying `action`, or the expert step.
    pub fn representative(&self, action: &Action) -> Option<&StepSample> {
        self.sampled
            .iter()
            .chain([&self.expert])
            .find(|s| &s.action == action)
    }
}

/// `1(|{a^(1), ..., a^(N), a_t}| > 1)`.
pub fn needs_deliberation(c: &CandidateSet) -> bool {
    c.unique_actions.len() > 1
}

/// Draws `n` samples at `h` (draw `i` uses a seed derived from `(seed, i)`)
/// and adds the expert action with an empty thought.
pub fn sample_candidates(
    p: &dyn Policy,
    h: &History,
    expert_step: &Step,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<CandidateSet, SamplerError> {
    if n == 0 {
        return Err(SamplerError::ZeroSamples);
    }
    let step = h.len();
    let sampled = (0..n)
        .map(|i| p.sample_step(h, temperature, derive_seed(seed, &[i as u64])))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| SamplerError::Policy { step, source })?;
    let expert = StepSample::new(Thought::empty(), expert_step.action.clone());
    Ok(CandidateSet::new(step, expert, sampled))
}

/// Seed for the candidate draws at `step` of a trajectory scanned with
/// `seed`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    derive_seed(seed, &[step as u64])
}

/// Replays `e` and samples a candidate set at every step, each conditioned on
/// the expert history before that step.
pub fn scan_trajectory(
    p: &dyn Policy,
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<CandidateSet>, SamplerError> {
    let initial = check_replayable(backend, spec, e)?;
    e.steps()
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let h = History::expert_prefix(e, Some(initial.clone()), t);
            sample_candidates(p, &h, step, n, temperature, step_seed(seed, t))
        })
        .collect()
}

/// Replays every expert step that has a successor and checks its recorded
/// observation, so that each prefix `h_t` with `t < L` is reachable.
pub fn check_replayable(
    backend: &dyn EnvBackend,
    spec: &TaskSpec,
    e: &Trajectory,
) -> Result<Observation, EnvError> {
    let (mut env, initial) = backend.reset(spec)?;
    for (i, step) in e.steps()[..e.len() - 1].iter().enumerate() {
        let diverged = |actual: String| EnvError::ReplayDivergence {
            step: i,
            expected: step.observation.as_ref().map(|o| o.0.clone()).unwrap_or_default(),
            actual,
        };
        if env.terminated() {
            return Err(diverged("<episode closed>".into()));
        }
        let outcome = env.step(&step.action)?;
        if step.observation.as_ref() != Some(&outcome.observation) {
            return Err(diverged(outcome.observation.0));
        }
    }
    Ok(initial)
}
