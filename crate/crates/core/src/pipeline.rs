//! One synthesis pass over an expert dataset: scan each trajectory with the
//! current policy, and at every inconsistent step roll out the candidates,
//! critique them, maybe switch, and write a deliberation thought.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use thiserror::Error;

use crate::critique::{critique_all, CritiqueError};
use crate::env::{EnvBackend, EnvError, TaskSpec};
use crate::exec::{derive_seed, string_seed, Execution};
use crate::policy::{BaseModel, Policy, PolicyError};
use crate::rollout::{rollout_unique, RolloutError};
use crate::sampler::{check_replayable, needs_deliberation, sample_candidates, step_seed, SamplerError};
use crate::synthesis::{
    assemble, build_deliberation_prompt, decide_switch, synthesize, StepPlan, SynthesisError,
};
use crate::trajectory::{DeliberationTrajectory, History, Trajectory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no task spec for trajectory {0:?}")]
    MissingTask(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

impl PipelineError {
    /// The failure came from an unreachable model backend.
    pub fn is_unavailable(&self) -> bool {
        match self {
            PipelineError::Sampler(SamplerError::Policy { source, .. }) => {
                matches!(source, PolicyError::PolicyUnavailable(_))
            }
            PipelineError::Rollout(e) => e.is_unavailable(),
            PipelineError::Critique(e) => e.is_unavailable(),
            PipelineError::Synthesis(SynthesisError::Policy(PolicyError::PolicyUnavailable(_))) => true,
            PipelineError::Env(EnvError::EnvTimeout(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub n: usize,
    pub sample_temperature: f64,
    pub expert_switch: bool,
    pub reroll_expert: bool,
    /// Iteration tag of the output, starting at 1.
    pub iteration: u32,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n: 5,
            sample_temperature: 1.0,
            expert_switch: true,
            reroll_expert: false,
            iteration: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub policy: &'a dyn Policy,
    pub base: &'a dyn BaseModel,
    pub env: &'a dyn EnvBackend,
}

/// Counts completions issued through it.
pub struct CountingBase<'a> {
    inner: &'a dyn BaseModel,
    count: AtomicUsize,
}

impl<'a> CountingBase<'a> {
    pub fn new(inner: &'a dyn BaseModel) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl BaseModel for CountingBase<'_> {
    fn complete_text(&self, prompt: &str, temperature: f64) -> Result<String, PolicyError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.complete_text(prompt, temperature)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub trajectory: DeliberationTrajectory,
    /// Inconsistency indicator of every scanned step.
    pub flags: Vec<bool>,
    pub switched: bool,
}

pub fn trajectory_seed(cfg: &SynthesisConfig, id: &str) -> u64 {
    derive_seed(cfg.seed, &[cfg.iteration as u64, string_seed(id)])
}

/// Runs the full pass on one expert trajectory. Scanning stops after a
/// switch, since the remaining steps then come from the winning rollout.
pub fn synthesize_trajectory(
    b: Backends<'_>,
    spec: &TaskSpec,
    e: &Trajectory,
    cfg: &SynthesisConfig,
    exec: Execution,
) -> Result<TrajectoryOutcome, PipelineError> {
    let seed = trajectory_seed(cfg, e.id());
    let initial = check_replayable(b.env, spec, e)?;
    let mut plans = Vec::with_capacity(e.len());
    let mut flags = Vec::with_capacity(e.len());
    let mut switched = false;
    for (t, step) in e.steps().iter().enumerate() {
        let h = History::expert_prefix(e, Some(initial.clone()), t);
        let c = sample_candidates(b.policy, &h, step, cfg.n, cfg.sample_temperature, step_seed(seed, t))?;
        let flagged = needs_deliberation(&c);
        flags.push(flagged);
        if !flagged {
            plans.push(StepPlan::Plain {
                candidate_count: c.unique_count(),
            });
            continue;
        }
        let records = rollout_unique(
            b.policy,
            b.env,
            spec,
            e,
            &c,
            cfg.sample_temperature,
            derive_seed(seed, &[t as u64, 1]),
            cfg.reroll_expert,
            exec,
        )?;
        let expert_record = &records[&c.expert.action];
        let decision = decide_switch(cfg.expert_switch, expert_record, &records);
        let critiques = critique_all(b.base, e.instruction(), &h, &records, exec)?;
        let pairs: Vec<_> = critiques.into_iter().collect();
        let prompt = build_deliberation_prompt(e.instruction(), &h, &pairs, &decision.chosen)?;
        let draft = synthesize(b.base, &prompt, &pairs, &decision.chosen)?;
        let switch_rollout = decision.switched.then(|| records[&decision.chosen].clone());
        switched = decision.switched;
        plans.push(StepPlan::Deliberate {
            candidate_count: c.unique_count(),
            draft,
            decision,
            switch_rollout,
        });
        if switched {
            break;
        }
    }
    let trajectory = assemble(e, &plans, cfg.iteration)?;
    Ok(TrajectoryOutcome {
        trajectory,
        flags,
        switched,
    })
}

#[derive(Debug)]
pub struct Reject {
    pub id: String,
    pub error: PipelineError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Summary {
    pub trajectories: usize,
    pub flagged_steps: usize,
    pub switches: usize,
    pub completions: usize,
    pub rejected: usize,
}

#[derive(Debug)]
pub struct SynthesisRun {
    /// Successful outcomes in input order.
    pub outcomes: Vec<TrajectoryOutcome>,
    pub rejects: Vec<Reject>,
    pub summary: Summary,
}

impl SynthesisRun {
    pub fn trajectories(&self) -> Vec<DeliberationTrajectory> {
        self.outcomes.iter().map(|o| o.trajectory.clone()).collect()
    }
}

/// Synthesizes every expert trajectory; failures are collected as rejects
/// rather than aborting the pass.
pub fn synthesize_dataset(
    b: Backends<'_>,
    specs: &[TaskSpec],
    experts: &[Trajectory],
    cfg: &SynthesisConfig,
    exec: Execution,
) -> SynthesisRun {
    let by_id: HashMap<&str, &TaskSpec> = specs.iter().map(|s| (s.id(), s)).collect();
    let counting = CountingBase::new(b.base);
    let inner = Backends { base: &counting, ..b };
    let results = exec.map(experts, |_, e| {
        let spec = by_id
            .get(e.id())
            .ok_or_else(|| PipelineError::MissingTask(e.id().to_string()))?;
        synthesize_trajectory(inner, spec, e, cfg, exec.nested())
    });
    let mut outcomes = Vec::new();
    let mut rejects = Vec::new();
    for (e, r) in experts.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(error) => rejects.push(Reject {
                id: e.id().to_string(),
                error,
            }),
        }
    }
    let summary = Summary {
        trajectories: outcomes.len(),
        flagged_steps: outcomes.iter().map(|o| o.trajectory.deliberated_steps()).sum(),
        switches: outcomes.iter().filter(|o| o.switched).count(),
        completions: counting.count(),
        rejected: rejects.len(),
    };
    SynthesisRun {
        outcomes,
        rejects,
        summary,
    }
}

/// Flag vectors by trajectory id, for comparing against stored flags.
pub fn flag_table(run: &SynthesisRun) -> IndexMap<String, Vec<bool>> {
    run.outcomes
        .iter()
        .map(|o| (o.trajectory.source_trajectory_id().to_string(), o.flags.clone()))
        .collect()
}
