//! Tabular policy: a finite `(thought, action)` distribution per history,
//! keyed by the canonical action sequence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Policy, PolicyError, ScorablePolicy, StepSample};
use crate::trajectory::{Action, History, LogProb, Thought};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    entries: Vec<(StepSample, f64)>,
}

impl Distribution {
    pub fn new(entries: Vec<(StepSample, f64)>) -> Result<Self, PolicyError> {
        if entries.is_empty() {
            return Err(PolicyError::Invalid("empty distribution".into()));
        }
        if let Some((_, p)) = entries.iter().find(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(PolicyError::Invalid(format!("bad probability {p}")));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(PolicyError::Invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { entries })
    }

    pub fn point(sample: StepSample) -> Self {
        Self {
            entries: vec![(sample, 1.0)],
        }
    }

    pub fn uniform(samples: Vec<StepSample>) -> Result<Self, PolicyError> {
        let p = 1.0 / samples.len().max(1) as f64;
        Self::new(samples.into_iter().map(|s| (s, p)).collect())
    }

    /// Action-only distribution from `(action, prob)` pairs.
    pub fn over_actions(pairs: &[(&str, f64)]) -> Result<Self, PolicyError> {
        let entries = pairs
            .iter()
            .map(|(a, p)| {
                Action::parse(a)
                    .map(|a| (StepSample::action_only(a), *p))
                    .map_err(|e| PolicyError::Invalid(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(StepSample, f64)] {
        &self.entries
    }

    /// Temperature-scaled probabilities `p_i^(1/T) / Z`; `T = 0` puts all
    /// mass on the first most likely entry. `T = 1` returns the stored masses.
    pub fn tempered(&self, temperature: f64) -> Vec<f64> {
        if temperature == 1.0 {
            return self.entries.iter().map(|(_, p)| *p).collect();
        }
        let max = self
            .entries
            .iter()
            .map(|(_, p)| *p)
            .fold(f64::NEG_INFINITY, f64::max);
        if temperature <= 0.0 {
            let arg = self
                .entries
                .iter()
                .position(|(_, p)| *p == max)
                .unwrap_or(0);
            return (0..self.entries.len())
                .map(|i| if i == arg { 1.0 } else { 0.0 })
                .collect();
        }
        let weights: Vec<f64> = self
            .entries
            .iter()
            .map(|(_, p)| {
                if *p == 0.0 {
                    0.0
                } else {
                    ((p.ln() - max.ln()) / temperature).exp()
                }
            })
            .collect();
        let z: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / z).collect()
    }

    fn draw(&self, temperature: f64, seed: u64) -> StepSample {
        let probs = self.tempered(temperature);
        if temperature <= 0.0 {
            let i = probs.iter().position(|p| *p == 1.0).unwrap_or(0);
            return self.entries[i].0.clone();
        }
        let u: f64 = ChaCha8Rng::seed_from_u64(seed).random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            last = i;
            acc += p;
            if u < acc {
                return self.entries[i].0.clone();
            }
        }
        self.entries[last].0.clone()
    }

    fn mass_of(&self, s: &StepSample, temperature: f64) -> f64 {
        self.tempered(temperature)
            .iter()
            .zip(&self.entries)
            .filter(|(_, (e, _))| e.action == s.action && e.thought.text == s.thought.text)
            .map(|(p, _)| p)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// Keyed by (task id, canonical action history); a `None` task applies
    /// to every task.
    table: BTreeMap<(Option<String>, Vec<String>), Distribution>,
    fallback: Option<Distribution>,
    scoring_temperature: f64,
}

impl TabularPolicy {
    pub fn new(fallback: Option<Distribution>) -> Self {
        Self {
            table: BTreeMap::new(),
            fallback,
            scoring_temperature: 1.0,
        }
    }

    /// Single distribution used in every state.
    pub fn stationary(dist: Distribution) -> Self {
        Self::new(Some(dist))
    }

    pub fn with_state(mut self, actions: &[&str], dist: Distribution) -> Self {
        self.insert(None, actions.iter().map(|a| canonical_key(a)).collect(), dist);
        self
    }

    /// A state that only applies under instruction `task`.
    pub fn with_task_state(mut self, task: &str, actions: &[&str], dist: Distribution) -> Self {
        self.insert(
            Some(task.to_string()),
            actions.iter().map(|a| canonical_key(a)).collect(),
            dist,
        );
        self
    }

    pub fn insert(&mut self, task: Option<String>, key: Vec<String>, dist: Distribution) {
        self.table.insert((task, key), dist);
    }

    pub fn with_scoring_temperature(mut self, temperature: f64) -> Self {
        self.scoring_temperature = temperature;
        self
    }

    pub fn distribution(&self, h: &History) -> Result<&Distribution, PolicyError> {
        let key = (Some(h.instruction.id.clone()), h.action_key());
        let key = match self.table.get(&key) {
            Some(d) => return Ok(d),
            None => (None, key.1),
        };
        self.table
            .get(&key)
            .or(self.fallback.as_ref())
            .ok_or(PolicyError::UnknownState(key.1))
    }

    pub fn states(&self) -> impl Iterator<Item = (&(Option<String>, Vec<String>), &Distribution)> {
        self.table.iter()
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PolicyError::Invalid(format!("{}: {e}", path.display())))?;
        let file: TableFile = serde_json::from_str(&text)
            .map_err(|e| PolicyError::Invalid(format!("{}: {e}", path.display())))?;
        file.into_policy()
    }

    pub fn to_file(&self) -> TableFile {
        TableFile {
            fallback: self.fallback.as_ref().map(entries_to_file),
            states: self
                .table
                .iter()
                .map(|((task, k), d)| StateEntry {
                    task: task.clone(),
                    history: k.clone(),
                    dist: entries_to_file(d),
                })
                .collect(),
        }
    }
}

fn canonical_key(a: &str) -> String {
    Action::parse(a)
        .map(|a| a.canonical().to_string())
        .unwrap_or_default()
}

impl Policy for TabularPolicy {
    fn sample_step(
        &self,
        h: &History,
        temperature: f64,
        seed: u64,
    ) -> Result<StepSample, PolicyError> {
        Ok(self.distribution(h)?.draw(temperature, seed))
    }

    fn as_scorable(&self) -> Option<&dyn ScorablePolicy> {
        Some(self)
    }
}

impl ScorablePolicy for TabularPolicy {
    fn score_step(&self, h: &History, s: &StepSample) -> Result<LogProb, PolicyError> {
        let mass = self.distribution(h)?.mass_of(s, self.scoring_temperature);
        Ok(if mass > 0.0 {
            LogProb::Finite(mass.ln())
        } else {
            LogProb::OffSupport
        })
    }
}

/// On-disk JSON form of a tabular policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableFile {
    #[serde(default)]
    pub fallback: Option<Vec<EntryFile>>,
    #[serde(default)]
    pub states: Vec<StateEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub history: Vec<String>,
    pub dist: Vec<EntryFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryFile {
    #[serde(default)]
    pub thought: String,
    pub action: String,
    pub prob: f64,
}

fn entries_to_file(d: &Distribution) -> Vec<EntryFile> {
    d.entries
        .iter()
        .map(|(s, p)| EntryFile {
            thought: s.thought.text.clone(),
            action: s.action.raw().to_string(),
            prob: *p,
        })
        .collect()
}

fn entries_from_file(entries: Vec<EntryFile>) -> Result<Distribution, PolicyError> {
    let entries = entries
        .into_iter()
        .map(|e| {
            let action = Action::parse(&e.action).map_err(|err| PolicyError::Invalid(err.to_string()))?;
            Ok((StepSample::new(Thought::plain(e.thought), action), e.prob))
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    Distribution::new(entries)
}

impl TableFile {
    pub fn into_policy(self) -> Result<TabularPolicy, PolicyError> {
        let fallback = self.fallback.map(entries_from_file).transpose()?;
        let mut p = TabularPolicy::new(fallback);
        for s in self.states {
            let key = s.history.iter().map(|a| canonical_key(a)).collect();
            p.insert(s.task, key, entries_from_file(s.dist)?);
        }
        Ok(p)
    }
}
