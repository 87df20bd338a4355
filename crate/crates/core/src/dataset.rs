//! JSONL persistence for expert and deliberation datasets, chat export for an
//! external trainer, and the iteration bookkeeping that hands each
//! iteration's output to the next one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{render_model_step, ChatMessage};
use crate::prompt::environment_prompt;
use crate::trajectory::{
    Action, DeliberationStep, DeliberationTrajectory, Instruction, Observation, Split, Step,
    Thought, ThoughtKind, Trajectory,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Load { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error("all {0} iterations are complete")]
    IterationComplete(u32),
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
}

impl DatasetError {
    /// Line number of a load or validation failure.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Load { line, .. } | DatasetError::Validation { line, .. } => Some(*line),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub thought: String,
    pub kind: ThoughtKind,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    pub deliberated: bool,
    pub candidate_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema: u32,
    pub id: String,
    pub instruction: String,
    pub split: Split,
    pub reward: f64,
    pub iteration: u32,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn from_expert(e: &Trajectory) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            id: e.id().to_string(),
            instruction: e.instruction().text.clone(),
            split: e.instruction().split,
            reward: e.reward(),
            iteration: 0,
            steps: e
                .steps()
                .iter()
                .map(|s| StepRecord {
                    thought: s.thought.text.clone(),
                    kind: s.thought.kind,
                    action: s.action.raw().to_string(),
                    observation: s.observation.as_ref().map(|o| o.0.clone()),
                    deliberated: false,
                    candidate_count: 0,
                })
                .collect(),
        }
    }

    pub fn from_deliberation(d: &DeliberationTrajectory) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            id: d.source_trajectory_id().to_string(),
            instruction: d.instruction().text.clone(),
            split: d.instruction().split,
            reward: d.reward(),
            iteration: d.iteration(),
            steps: d
                .steps()
                .iter()
                .map(|s| StepRecord {
                    thought: s.thought.text.clone(),
                    kind: s.thought.kind,
                    action: s.action.raw().to_string(),
                    observation: s.observation.as_ref().map(|o| o.0.clone()),
                    deliberated: s.deliberated(),
                    candidate_count: s.candidate_count(),
                })
                .collect(),
        }
    }

    fn instruction(&self) -> Result<Instruction, String> {
        Instruction::new(&self.id, &self.instruction, self.split).map_err(|e| e.to_string())
    }

    fn parts(&self) -> Result<Vec<(Thought, Action, Option<Observation>)>, String> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let action = Action::parse(&s.action).map_err(|e| format!("step {i}: {e}"))?;
                let thought = Thought {
                    text: s.thought.clone(),
                    kind: s.kind,
                };
                Ok((thought, action, s.observation.clone().map(Observation)))
            })
            .collect()
    }

    pub fn to_trajectory(&self) -> Result<Trajectory, String> {
        let steps = self
            .parts()?
            .into_iter()
            .map(|(t, a, o)| Step::new(t, a, o))
            .collect();
        Trajectory::new(self.instruction()?, steps, self.reward).map_err(|e| e.to_string())
    }

    pub fn to_deliberation(&self) -> Result<DeliberationTrajectory, String> {
        let steps = self
            .parts()?
            .into_iter()
            .zip(&self.steps)
            .enumerate()
            .map(|(i, ((t, a, o), s))| {
                let step = DeliberationStep::new(t, a, o, s.candidate_count)
                    .map_err(|e| format!("step {i}: {e}"))?;
                if step.deliberated() != s.deliberated {
                    return Err(format!("step {i}: deliberated flag disagrees with candidate_count"));
                }
                Ok(step)
            })
            .collect::<Result<Vec<_>, String>>()?;
        DeliberationTrajectory::new(self.instruction()?, steps, &self.id, self.iteration, self.reward)
            .map_err(|e| e.to_string())
    }
}

/// Raw records with their one-based line numbers.
pub fn load_records(path: &Path) -> Result<Vec<(usize, TrajectoryRecord)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| DatasetError::Load {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.schema != SCHEMA_VERSION {
            return Err(DatasetError::Load {
                line: line_no,
                msg: format!("unsupported schema version {}", rec.schema),
            });
        }
        out.push((line_no, rec));
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    load_records(path)?
        .into_iter()
        .map(|(line, r)| r.to_trajectory().map_err(|msg| DatasetError::Validation { line, msg }))
        .collect()
}

pub fn load_deliberation(path: &Path) -> Result<Vec<DeliberationTrajectory>, DatasetError> {
    load_records(path)?
        .into_iter()
        .map(|(line, r)| r.to_deliberation().map_err(|msg| DatasetError::Validation { line, msg }))
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("records serialize");
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Deliberation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub trajectory_count: usize,
    pub iteration: u32,
    pub source: Source,
    /// sha256 of the file, hex.
    pub checksum: String,
    /// Advisory epoch count for the external trainer.
    pub epochs: u32,
}

pub fn file_checksum(path: &Path) -> Result<String, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl DatasetManifest {
    pub fn for_file(path: &Path, source: Source, iteration: u32) -> Result<Self, DatasetError> {
        let trajectory_count = load_records(path)?.len();
        Ok(Self {
            path: path.to_path_buf(),
            trajectory_count,
            iteration,
            source,
            checksum: file_checksum(path)?,
            epochs: if iteration <= 1 { 3 } else { 1 },
        })
    }

    pub fn verify(&self) -> Result<(), DatasetError> {
        if file_checksum(&self.path)? == self.checksum {
            Ok(())
        } else {
            Err(DatasetError::Checksum(self.path.clone()))
        }
    }
}

pub fn write_trajectories(ts: &[Trajectory], path: &Path) -> Result<DatasetManifest, DatasetError> {
    if ts.is_empty() {
        return Err(DatasetError::Empty);
    }
    let records: Vec<_> = ts.iter().map(TrajectoryRecord::from_expert).collect();
    write_lines(path, &records)?;
    DatasetManifest::for_file(path, Source::Expert, 0)
}

pub fn write_deliberation(
    ds: &[DeliberationTrajectory],
    path: &Path,
) -> Result<DatasetManifest, DatasetError> {
    let Some(first) = ds.first() else {
        return Err(DatasetError::Empty);
    };
    let records: Vec<_> = ds.iter().map(TrajectoryRecord::from_deliberation).collect();
    write_lines(path, &records)?;
    DatasetManifest::for_file(path, Source::Deliberation, first.iteration())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub messages: Vec<ChatMessage>,
}

/// One chat record per trajectory: the environment prompt as system message,
/// the instruction as the first user turn, then alternating assistant steps
/// and user observations.
pub fn chat_record(e: &Trajectory, system: &str) -> ChatRecord {
    let mut messages = vec![
        ChatMessage::new("system", system),
        ChatMessage::new("user", e.instruction().text.clone()),
    ];
    let last = e.len() - 1;
    for (i, s) in e.steps().iter().enumerate() {
        messages.push(ChatMessage::new("assistant", render_model_step(&s.thought, &s.action)));
        if let (true, Some(o)) = (i < last, &s.observation) {
            messages.push(ChatMessage::new("user", o.0.clone()));
        }
    }
    ChatRecord { messages }
}

pub fn export_sft_chat(ds: &[Trajectory], path: &Path, asset: &str) -> Result<usize, DatasetError> {
    let template = environment_prompt(asset).map_err(|e| DatasetError::Config(e.to_string()))?;
    let system = template
        .render(&[("task", String::new())].into())
        .expect("task slot")
        .trim_end()
        .to_string();
    let records: Vec<_> = ds.iter().map(|e| chat_record(e, &system)).collect();
    write_lines(path, &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationState {
    pub k: u32,
    pub total: u32,
    pub current_manifest: DatasetManifest,
    pub history: Vec<DatasetManifest>,
}

impl IterationState {
    pub fn new(total: u32, expert: DatasetManifest) -> Self {
        Self {
            k: 0,
            total,
            current_manifest: expert.clone(),
            history: vec![expert],
        }
    }

    pub fn is_complete(&self) -> bool {
        self.k >= self.total
    }

    pub fn advance(mut self, new_manifest: DatasetManifest) -> Result<Self, DatasetError> {
        if self.is_complete() {
            return Err(DatasetError::IterationComplete(self.total));
        }
        self.k += 1;
        self.history.push(new_manifest.clone());
        self.current_manifest = new_manifest;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(iteration: u32) -> DatasetManifest {
        DatasetManifest {
            path: PathBuf::from(format!("d{iteration}.jsonl")),
            trajectory_count: 1,
            iteration,
            source: Source::Deliberation,
            checksum: String::new(),
            epochs: 1,
        }
    }

    #[test]
    fn advance_until_complete() {
        let s = IterationState::new(2, manifest(0));
        let s = s.advance(manifest(1)).unwrap();
        assert_eq!((s.k, s.history.len()), (1, 2));
        assert_eq!(s.current_manifest, manifest(1));
        let s = s.advance(manifest(2)).unwrap();
        assert!(matches!(s.advance(manifest(3)), Err(DatasetError::IterationComplete(2))));
    }
}
