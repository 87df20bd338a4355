//! Deliberation synthesis: turn the action/critique pairs at a flagged step
//! into a reasoning block that lands on the committed action, optionally
//! switch that action to a better explored one, and assemble the trajectory.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::critique::Critique;
use crate::metrics::is_deliberative_text;
use crate::policy::{BaseModel, PolicyError};
use crate::prompt::{deliberation_template, render_history, SCRATCH_PAD_SLOT};
use crate::rollout::RolloutRecord;
use crate::trajectory::{
    Action, DeliberationStep, DeliberationTrajectory, History, Instruction, Step, Thought,
    ThoughtKind, Trajectory, TrajectoryError,
};

const SCREENS: [&str; 3] = ["scratch-pad", "scratch pad", "simulation"];

const REMINDER: &str = "\n\nFollow the Output Format exactly: a `Thought:` line, one `- <candidate action>: <judgement>` line per candidate, then your rationale.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("deliberation contract violated: {0}")]
    Contract(String),
    #[error("deliberation unparseable: {0}")]
    Parse(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("cannot assemble trajectory: {0}")]
    Assembly(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliberationDraft {
    pub reflection: String,
    pub bullets: Vec<(Action, String)>,
    pub rationale: String,
}

impl DeliberationDraft {
    /// Parses a completion in the prompt's output format and checks it
    /// against the candidate actions.
    pub fn parse(completion: &str, candidates: &[Action]) -> Result<Self, String> {
        let lower = completion.to_lowercase();
        if let Some(hit) = SCREENS.iter().find(|s| lower.contains(*s)) {
            return Err(format!("mentions {hit:?}"));
        }
        let idx = completion
            .find("Thought:")
            .ok_or("no \"Thought:\" line")?;
        let body = &completion[idx + "Thought:".len()..];

        let mut reflection = Vec::new();
        let mut bullets: Vec<(Action, String)> = Vec::new();
        let mut rationale = Vec::new();
        for line in body.lines().map(str::trim) {
            let bullet = line
                .strip_prefix("- ")
                .and_then(|rest| rest.split_once(':'))
                .and_then(|(a, j)| Some((Action::parse(a).ok()?, j.trim())));
            match bullet {
                Some((action, judgement)) if rationale.is_empty() => {
                    if !candidates.contains(&action) {
                        return Err(format!("bullet for unknown action {:?}", action.canonical()));
                    }
                    if bullets.iter().any(|(a, _)| *a == action) {
                        return Err(format!("action {:?} listed twice", action.canonical()));
                    }
                    let raw = candidates.iter().find(|c| **c == action).cloned().unwrap_or(action);
                    bullets.push((raw, judgement.to_string()));
                }
                _ if line.is_empty() => {}
                _ if bullets.is_empty() => reflection.push(line),
                _ => rationale.push(line),
            }
        }
        if reflection.is_empty() {
            return Err("empty reflection".into());
        }
        if bullets.len() < 2 {
            return Err(format!("{} candidate bullets, need at least 2", bullets.len()));
        }
        if let Some(missing) = candidates.iter().find(|c| !bullets.iter().any(|(a, _)| a == *c)) {
            return Err(format!("no bullet for {:?}", missing.canonical()));
        }
        if rationale.is_empty() {
            return Err("no rationale after the bullets".into());
        }
        Ok(Self {
            reflection: reflection.join(" "),
            bullets,
            rationale: rationale.join("\n"),
        })
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse_rendered(text: &str, candidates: &[Action]) -> Result<Self, String> {
        Self::parse(&format!("Thought: {text}"), candidates)
    }

    /// The thought text: reflection, bullets and rationale separated by
    /// blank lines.
    pub fn render(&self) -> String {
        let bullets: Vec<String> = self
            .bullets
            .iter()
            .map(|(a, j)| format!("- {}: {j}", a.raw()))
            .collect();
        format!("{}\n\n{}\n\n{}", self.reflection, bullets.join("\n"), self.rationale)
    }
}

pub fn build_deliberation_prompt(
    instruction: &Instruction,
    h: &History,
    pairs: &[(Action, Critique)],
    target: &Action,
) -> Result<String, SynthesisError> {
    if !pairs.iter().any(|(a, _)| a == target) {
        return Err(SynthesisError::Contract(format!(
            "target {:?} is not among the candidates",
            target.canonical()
        )));
    }
    let scratch: Vec<String> = pairs
        .iter()
        .map(|(a, c)| {
            let text = c.text.split_whitespace().collect::<Vec<_>>().join(" ");
            format!("- {}: {text}", a.raw())
        })
        .collect();
    let values = BTreeMap::from([
        ("task_instrution", instruction.text.clone()),
        ("interaction_history", render_history(h)),
        (SCRATCH_PAD_SLOT, scratch.join("\n")),
        ("expert_action", target.raw().to_string()),
    ]);
    Ok(deliberation_template()
        .render(&values)
        .expect("deliberation slots are fixed"))
}

/// Completes the deliberation prompt greedily; one retry on a bad draft.
pub fn synthesize(
    base: &dyn BaseModel,
    prompt: &str,
    pairs: &[(Action, Critique)],
    target: &Action,
) -> Result<DeliberationDraft, SynthesisError> {
    if !pairs.iter().any(|(a, _)| a == target) {
        return Err(SynthesisError::Contract("target missing from pairs".into()));
    }
    let candidates: Vec<Action> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let mut reason = String::new();
    for attempt in 0..2 {
        let p = if attempt == 0 {
            prompt.to_string()
        } else {
            format!("{prompt}{REMINDER}")
        };
        let completion = base.complete_text(&p, 0.0)?;
        match DeliberationDraft::parse(&completion, &candidates) {
            Ok(d) => return Ok(d),
            Err(r) => reason = r,
        }
    }
    Err(SynthesisError::Parse(reason))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchDecision {
    pub original: Action,
    pub chosen: Action,
    pub switched: bool,
    pub original_reward: f64,
    pub best_reward: f64,
}

/// Keeps the expert action unless switching is enabled and some other
/// action's rollout earned strictly more. Ties among the best alternatives
/// go to the lexicographically smallest canonical action.
pub fn decide_switch(
    enabled: bool,
    expert_record: &RolloutRecord,
    others: &IndexMap<Action, RolloutRecord>,
) -> SwitchDecision {
    let original = expert_record.candidate.action.clone();
    let keep = SwitchDecision {
        original: original.clone(),
        chosen: original.clone(),
        switched: false,
        original_reward: expert_record.final_reward,
        best_reward: expert_record.final_reward,
    };
    if !enabled {
        return keep;
    }
    let best = others
        .iter()
        .filter(|(a, _)| **a != original)
        .fold(None::<(&Action, f64)>, |acc, (a, r)| match acc {
            Some((_, best)) if r.final_reward < best => acc,
            Some((b, best)) if r.final_reward == best && b <= a => acc,
            _ => Some((a, r.final_reward)),
        });
    match best {
        Some((a, reward)) if reward > expert_record.final_reward => SwitchDecision {
            chosen: a.clone(),
            switched: true,
            best_reward: reward,
            ..keep
        },
        _ => keep,
    }
}

/// What to do with one expert step.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum StepPlan {
    /// Copy the expert step verbatim.
    Plain { candidate_count: usize },
    Deliberate {
        candidate_count: usize,
        draft: DeliberationDraft,
        decision: SwitchDecision,
        /// The chosen action's rollout when `decision.switched`.
        switch_rollout: Option<RolloutRecord>,
    },
}

/// Copies a step that was not deliberated at this pass. A deliberative
/// thought inherited from an earlier iteration is dropped, leaving an
/// action-only turn, so thought text and flags stay in agreement.
pub fn carry_step(step: &Step, candidate_count: usize) -> DeliberationStep {
    if step.thought.kind == ThoughtKind::Deliberative || is_deliberative_text(&step.thought.text) {
        let bare = Step::new(Thought::empty(), step.action.clone(), step.observation.clone());
        return DeliberationStep::plain(&bare, candidate_count);
    }
    DeliberationStep::plain(step, candidate_count)
}

/// Builds the deliberation trajectory for `e`. `plans` covers every step, or
/// stops at the step where a switch happened; the winning rollout supplies
/// the rest of the episode.
pub fn assemble(
    e: &Trajectory,
    plans: &[StepPlan],
    iteration: u32,
) -> Result<DeliberationTrajectory, SynthesisError> {
    let gap = |msg: String| SynthesisError::Assembly(format!("{}: {msg}", e.id()));
    let mut steps = Vec::new();
    let mut reward = e.reward();
    for (t, plan) in plans.iter().enumerate() {
        let expert = e
            .steps()
            .get(t)
            .ok_or_else(|| gap(format!("{} plans for {} steps", plans.len(), e.len())))?;
        match plan {
            StepPlan::Plain { candidate_count } => {
                steps.push(carry_step(expert, *candidate_count));
            }
            StepPlan::Deliberate {
                candidate_count,
                draft,
                decision,
                switch_rollout,
            } => {
                let thought = Thought::deliberative(draft.render());
                if !decision.switched {
                    let step = DeliberationStep::new(
                        thought,
                        expert.action.clone(),
                        expert.observation.clone(),
                        *candidate_count,
                    )
                    .map_err(|err| gap(format!("step {t}: {err}")))?;
                    steps.push(step);
                    continue;
                }
                let r = switch_rollout
                    .as_ref()
                    .ok_or_else(|| gap(format!("step {t}: switch without its rollout")))?;
                let first = r
                    .continuation
                    .first()
                    .filter(|s| s.action == decision.chosen)
                    .ok_or_else(|| gap(format!("step {t}: rollout does not start with the chosen action")))?;
                steps.push(
                    DeliberationStep::new(thought, first.action.clone(), first.observation.clone(), *candidate_count)
                        .map_err(|err| gap(format!("step {t}: {err}")))?,
                );
                steps.extend(r.continuation[1..].iter().map(|s| carry_step(s, 0)));
                reward = decision.best_reward;
                if t + 1 != plans.len() {
                    return Err(gap(format!("plans continue past the switch at step {t}")));
                }
                return Ok(DeliberationTrajectory::new(
                    e.instruction().clone(),
                    steps,
                    e.id(),
                    iteration,
                    reward,
                )?);
            }
        }
    }
    if plans.len() != e.len() {
        return Err(gap(format!("{} plans for {} steps", plans.len(), e.len())));
    }
    Ok(DeliberationTrajectory::new(
        e.instruction().clone(),
        steps,
        e.id(),
        iteration,
        reward,
    )?)
}
