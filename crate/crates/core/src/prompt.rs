//! Prompt assets and a small `{slot}` template engine.
//!
//! Only declared slot names are substituted; any other brace text (such as
//! `{obj}` in the household prompt) is literal. Substitution is a single pass,
//! so values containing `{...}` are never re-expanded.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::trajectory::{History, Step};

pub const CRITIQUE_PROMPT: &str = include_str!("../assets/critique_prompt.txt");
pub const DELIBERATION_PROMPT: &str = include_str!("../assets/deliberation_prompt.txt");
pub const ALFWORLD_PROMPT: &str = include_str!("../assets/alfworld_prompt.txt");
pub const SCIWORLD_PROMPT: &str = include_str!("../assets/sciworld_prompt.txt");

pub const CRITIQUE_SLOTS: [&str; 5] = [
    "task_instruction",
    "interaction_history",
    "sample_action",
    "executed_rollout",
    "sampled_action",
];

/// Slot standing in for the scratch-pad example lines of the deliberation
/// asset, which expand to one line per candidate.
pub const SCRATCH_PAD_SLOT: &str = "scratch_pad";

pub const DELIBERATION_SLOTS: [&str; 4] = [
    "task_instrution",
    "interaction_history",
    SCRATCH_PAD_SLOT,
    "expert_action",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("no value for slot {{{0}}}")]
    MissingSlot(String),
    #[error("template has no slot {{{0}}}")]
    UnknownSlot(String),
    #[error("unknown environment prompt {0:?}")]
    UnknownAsset(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    parts: Vec<Part>,
}

impl Template {
    /// Splits `text` at every `{name}` whose name is listed in `slots`.
    pub fn new(text: &str, slots: &[&str]) -> Self {
        let mut parts = Vec::new();
        let mut lit = String::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let slot = after
                .find('}')
                .map(|close| &after[..close])
                .filter(|name| slots.contains(name));
            lit.push_str(&rest[..open]);
            match slot {
                Some(name) => {
                    if !lit.is_empty() {
                        parts.push(Part::Literal(std::mem::take(&mut lit)));
                    }
                    parts.push(Part::Slot(name.to_string()));
                    rest = &after[name.len() + 1..];
                }
                None => {
                    lit.push('{');
                    rest = after;
                }
            }
        }
        lit.push_str(rest);
        if !lit.is_empty() {
            parts.push(Part::Literal(lit));
        }
        Self { parts }
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    /// Distinct slot names in order of first use.
    pub fn slots(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.parts {
            if let Part::Slot(s) = p {
                if !out.contains(&s.as_str()) {
                    out.push(s);
                }
            }
        }
        out
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let slots = self.slots();
        if let Some(extra) = values.keys().find(|k| !slots.contains(k)) {
            return Err(PromptError::UnknownSlot(extra.to_string()));
        }
        let mut out = String::new();
        for p in &self.parts {
            match p {
                Part::Literal(s) => out.push_str(s),
                Part::Slot(name) => out.push_str(
                    values
                        .get(name.as_str())
                        .ok_or_else(|| PromptError::MissingSlot(name.clone()))?,
                ),
            }
        }
        Ok(out)
    }
}

pub fn critique_template() -> Template {
    Template::new(CRITIQUE_PROMPT, &CRITIQUE_SLOTS)
}

/// The deliberation asset with its example scratch-pad lines folded into a
/// single [`SCRATCH_PAD_SLOT`].
pub fn deliberation_template() -> Template {
    let block: String = DELIBERATION_PROMPT
        .lines()
        .filter(|l| l.starts_with("- {candidate_action_"))
        .map(|l| format!("{l}\n"))
        .collect();
    let text = DELIBERATION_PROMPT.replacen(&block, &format!("{{{SCRATCH_PAD_SLOT}}}\n"), 1);
    Template::new(&text, &DELIBERATION_SLOTS)
}

/// System prompt for chat export, by environment asset name.
pub fn environment_prompt(name: &str) -> Result<Template, PromptError> {
    let text = match name {
        "alfworld" => ALFWORLD_PROMPT,
        "sciworld" => SCIWORLD_PROMPT,
        other => return Err(PromptError::UnknownAsset(other.to_string())),
    };
    Ok(Template::new(text, &["task"]))
}

/// One decimal place: `1.0`, `0.6`.
pub fn format_reward(r: f64) -> String {
    format!("{r:.1}")
}

pub fn render_steps(steps: &[Step]) -> String {
    let mut lines = Vec::new();
    for s in steps {
        if !s.thought.is_empty() {
            lines.push(format!("Thought: {}", s.thought.text));
        }
        lines.push(format!("Action: {}", s.action.raw()));
        if let Some(o) = &s.observation {
            lines.push(format!("Observation: {}", o.0));
        }
    }
    lines.join("\n")
}

/// The opening observation followed by the step transcript.
pub fn render_history(h: &History) -> String {
    let mut out = h
        .initial_observation
        .as_ref()
        .map(|o| o.0.clone())
        .unwrap_or_default();
    let steps = render_steps(&h.steps);
    if !steps.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&steps);
    }
    out
}

/// A rollout transcript ending with its reward line.
pub fn render_rollout(continuation: &[Step], reward: f64) -> String {
    format!("{}\nFinal reward: {}", render_steps(continuation), format_reward(reward))
}
