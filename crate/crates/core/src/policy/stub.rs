//! Deterministic stand-ins for the agent policy and the base model.
//!
//! [`TemplateStubBase`] reads the structured slots out of critique and
//! deliberation prompts and answers in the requested output format, so the
//! whole pipeline can run without model weights.

use super::{BaseModel, Policy, PolicyError, StepSample};
use crate::trajectory::{Action, History, Thought};

/// Always proposes the same step.
#[derive(Debug, Clone)]
pub struct TemplateStubPolicy {
    sample: StepSample,
}

impl TemplateStubPolicy {
    pub fn new(thought: &str, action: &str) -> Result<Self, PolicyError> {
        let action = Action::parse(action).map_err(|e| PolicyError::Invalid(e.to_string()))?;
        Ok(Self {
            sample: StepSample::new(Thought::plain(thought), action),
        })
    }
}

impl Policy for TemplateStubPolicy {
    fn sample_step(&self, _h: &History, _temperature: f64, _seed: u64) -> Result<StepSample, PolicyError> {
        Ok(self.sample.clone())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateStubBase;

const CRITIQUE_MARKER: &str = "### Private Mental Simulations";
const DELIBERATION_MARKER: &str = "### Private Scratch-pad";

impl TemplateStubBase {
    fn critique(prompt: &str) -> String {
        let action = between(prompt, "start with the action **", "**").unwrap_or("this action");
        let reward = prompt
            .rfind("Final reward: ")
            .map(|i| &prompt[i + "Final reward: ".len()..])
            .and_then(|rest| rest.split_whitespace().next())
            .unwrap_or("0.0");
        let value: f64 = reward.parse().unwrap_or(0.0);
        let verdict = if value >= 1.0 {
            "moves the task all the way to completion"
        } else if value > 0.0 {
            "makes only partial progress toward the goal"
        } else {
            "does not advance the task"
        };
        format!(
            "Action Evaluation: Executing {action} now {verdict}, ending with a reward of {reward}. \
             Objects are easier to reach once the receptacle holding them is open."
        )
    }

    fn deliberation(prompt: &str) -> String {
        let section = between(prompt, DELIBERATION_MARKER, "### Very Important").unwrap_or("");
        let bullets: Vec<(&str, &str)> = section
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .filter_map(|l| l.split_once(": "))
            .collect();
        let target = between(prompt, "must be **", "**").unwrap_or("the chosen action");
        let mut out = String::from(
            "Thought: My last move left me at a decision point, so I should weigh the next options.\n\n",
        );
        for (action, critique) in &bullets {
            out.push_str(&format!("- {action}: {}\n", first_sentence(critique)));
        }
        out.push_str(&format!(
            "\nComparing these options, {target} is the most reliable way forward, so I will do it now."
        ));
        out
    }
}

impl BaseModel for TemplateStubBase {
    fn complete_text(&self, prompt: &str, _temperature: f64) -> Result<String, PolicyError> {
        if prompt.trim().is_empty() {
            return Err(PolicyError::Invalid("empty prompt".into()));
        }
        Ok(if prompt.contains(CRITIQUE_MARKER) {
            Self::critique(prompt)
        } else if prompt.contains(DELIBERATION_MARKER) {
            Self::deliberation(prompt)
        } else {
            format!("Acknowledged a prompt of {} words.", prompt.split_whitespace().count())
        })
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(&text[s..e])
}

fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    match t.find(". ") {
        Some(i) => &t[..=i],
        None => t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn critique_stub_contract() {
        let prompt = "### Private Mental Simulations\nYou quietly imagined several futures that all start with the action **open fridge**.\n\nAction: open fridge\nFinal reward: 1.0\n";
        let out = TemplateStubBase.complete_text(prompt, 0.0).unwrap();
        assert!(out.starts_with("Action Evaluation:"));
        assert!(out.contains("open fridge"));
        assert!(out.contains("1.0"));
        assert_eq!(out, TemplateStubBase.complete_text(prompt, 0.0).unwrap());
    }

    #[test]
    fn deliberation_stub_lists_each_candidate() {
        let prompt = "### Private Scratch-pad\nnotes:\n- a: good. more\n- b: bad.\n- c: meh.\n\n### Very Important\nYour final **Action** line must be **a**. x";
        let out = TemplateStubBase.complete_text(prompt, 0.0).unwrap();
        assert_eq!(out.lines().filter(|l| l.starts_with("- ")).count(), 3);
        assert!(out.starts_with("Thought: "));
        assert!(out.contains("a is the most reliable"));
    }

    #[test]
    fn stub_policy_is_constant() {
        let p = TemplateStubPolicy::new("", "dance").unwrap();
        let h = History::new(
            crate::trajectory::Instruction::new("t", "x", crate::trajectory::Split::Train).unwrap(),
            None,
        );
        assert_eq!(p.sample_step(&h, 1.0, 1).unwrap(), p.sample_step(&h, 0.0, 2).unwrap());
    }
}
