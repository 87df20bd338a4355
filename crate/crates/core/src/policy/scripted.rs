use std::collections::HashMap;

use super::{Policy, PolicyError, StepSample};
use crate::trajectory::{History, Trajectory};

/// Replays recorded expert steps: the sample for history length `t` is the
/// expert's step `t`, whatever actions the history actually contains.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    scripts: HashMap<String, Vec<StepSample>>,
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trajectories<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let scripts = trajectories
            .into_iter()
            .map(|e| (e.id().to_string(), e.steps().iter().map(|s| s.sample()).collect()))
            .collect();
        Self { scripts }
    }

    pub fn with_script(mut self, id: impl Into<String>, steps: Vec<StepSample>) -> Self {
        self.scripts.insert(id.into(), steps);
        self
    }
}

impl Policy for ScriptedPolicy {
    fn sample_step(&self, h: &History, _temperature: f64, _seed: u64) -> Result<StepSample, PolicyError> {
        let id = &h.instruction.id;
        self.scripts
            .get(id)
            .and_then(|s| s.get(h.len()))
            .cloned()
            .ok_or_else(|| PolicyError::ScriptExhausted {
                id: id.clone(),
                index: h.len(),
            })
    }
}
