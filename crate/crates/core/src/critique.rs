//! Execution-guided critiques: one short verbal judgement per distinct
//! candidate action, conditioned on that action's own rollout and reward.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::exec::Execution;
use crate::policy::{BaseModel, PolicyError};
use crate::prompt::{critique_template, render_history, render_rollout};
use crate::rollout::RolloutRecord;
use crate::trajectory::{Action, History, Instruction};

pub const MARKER: &str = "Action Evaluation:";

const REMINDER: &str =
    "\n\nReply with a single paragraph that starts with `Action Evaluation:`.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CritiqueError {
    #[error("critique for {action:?} unparseable: {reason}")]
    Parse { action: String, reason: String },
    #[error("critique for {action:?}: {source}")]
    Policy { action: String, source: PolicyError },
    #[error("no rollout records to critique")]
    NoRecords,
}

impl CritiqueError {
    pub fn is_unavailable(&self) -> bool {
        matches!(
            self,
            CritiqueError::Policy {
                source: PolicyError::PolicyUnavailable(_),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critique {
    pub action: Action,
    pub text: String,
    pub reward_context: f64,
    pub sentences: usize,
}

/// Sentences counted by terminal punctuation; unterminated text is one.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let n = chars
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            matches!(c, '.' | '!' | '?')
                && chars.get(i + 1).is_none_or(|next| next.is_whitespace())
        })
        .count();
    if n == 0 && !chars.is_empty() {
        1
    } else {
        n
    }
}

pub fn build_critique_prompt(instruction: &Instruction, h: &History, r: &RolloutRecord) -> String {
    let action = r.candidate.action.raw().to_string();
    let values = BTreeMap::from([
        ("task_instruction", instruction.text.clone()),
        ("interaction_history", render_history(h)),
        ("sample_action", action.clone()),
        ("executed_rollout", render_rollout(&r.continuation, r.final_reward)),
        ("sampled_action", action),
    ]);
    critique_template()
        .render(&values)
        .expect("critique slots are fixed")
}

/// Text after the first marker, trimmed.
pub fn parse_critique(completion: &str) -> Result<String, String> {
    let idx = completion
        .find(MARKER)
        .ok_or_else(|| format!("no {MARKER:?} marker"))?;
    let text = completion[idx + MARKER.len()..].trim();
    if text.is_empty() {
        return Err("empty evaluation".into());
    }
    Ok(text.to_string())
}

/// Completes `prompt` greedily, retrying once with a format reminder.
pub fn generate_critique(
    base: &dyn BaseModel,
    prompt: &str,
    action: &Action,
    reward: f64,
) -> Result<Critique, CritiqueError> {
    let name = || action.canonical().to_string();
    let mut reason = String::new();
    for attempt in 0..2 {
        let p = if attempt == 0 {
            prompt.to_string()
        } else {
            format!("{prompt}{REMINDER}")
        };
        let completion = base
            .complete_text(&p, 0.0)
            .map_err(|source| CritiqueError::Policy { action: name(), source })?;
        match parse_critique(&completion) {
            Ok(text) => {
                return Ok(Critique {
                    action: action.clone(),
                    sentences: count_sentences(&text),
                    text,
                    reward_context: reward,
                })
            }
            Err(r) => reason = r,
        }
    }
    Err(CritiqueError::Parse { action: name(), reason })
}

/// One critique per record, keyed and ordered like `records`.
pub fn critique_all(
    base: &dyn BaseModel,
    instruction: &Instruction,
    h: &History,
    records: &IndexMap<Action, RolloutRecord>,
    exec: Execution,
) -> Result<IndexMap<Action, Critique>, CritiqueError> {
    if records.is_empty() {
        return Err(CritiqueError::NoRecords);
    }
    let entries: Vec<(&Action, &RolloutRecord)> = records.iter().collect();
    let out = exec.map(&entries, |_, (action, r)| {
        let prompt = build_critique_prompt(instruction, h, r);
        generate_critique(base, &prompt, action, r.final_reward)
    });
    entries
        .iter()
        .zip(out)
        .map(|((a, _), c)| c.map(|c| ((*a).clone(), c)))
        .collect()
}
