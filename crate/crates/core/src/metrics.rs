//! Evaluation harness and analysis metrics: average reward, per-step reward,
//! deliberation rate, difficulty bands and token accounting.
//!
//! Token counts are whitespace tokens. They are a model-agnostic proxy, so
//! only ratios between reports are meaningful.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvBackend, TaskSpec};
use crate::exec::{derive_seed, string_seed, Execution};
use crate::policy::{run_episode, Policy};
use crate::trajectory::{DeliberationTrajectory, History, ThoughtKind, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no tasks to evaluate")]
    EmptyEvaluation,
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("need at least 3 tasks for difficulty bands, got {0}")]
    TooFewTasks(usize),
    #[error("division by zero: {0}")]
    DivisionDomain(String),
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn per_step_reward(reward: f64, steps: usize) -> Result<f64, MetricsError> {
    if steps == 0 {
        return Err(MetricsError::ZeroSteps);
    }
    Ok(reward / steps as f64)
}

/// A thought reads as deliberative when at least two of its lines are
/// candidate bullets of the form `- <text>:`.
pub fn is_deliberative_text(text: &str) -> bool {
    text.lines()
        .filter(|l| {
            l.trim_start()
                .strip_prefix("- ")
                .and_then(|rest| rest.find(':'))
                .is_some_and(|i| i > 0)
        })
        .count()
        >= 2
}

/// Fraction of steps with a deliberative thought, by kind or by the bullet
/// classifier for generated text.
pub fn deliberation_rate(traj: &Trajectory) -> f64 {
    let n = traj.len();
    let d = traj
        .steps()
        .iter()
        .filter(|s| s.thought.kind == ThoughtKind::Deliberative || is_deliberative_text(&s.thought.text))
        .count();
    d as f64 / n as f64
}

/// Deliberation rate from stored step flags.
pub fn flagged_rate(traj: &DeliberationTrajectory) -> f64 {
    traj.deliberated_steps() as f64 / traj.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    Hard,
    Medium,
    Easy,
}

/// Splits tasks at the empirical tertiles of their rewards. The bottom third
/// is `Hard`; rewards tied with a boundary value fall into the lower band.
pub fn difficulty_bands(
    base_rewards: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, Band>, MetricsError> {
    let n = base_rewards.len();
    if n < 3 {
        return Err(MetricsError::TooFewTasks(n));
    }
    let mut sorted: Vec<f64> = base_rewards.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lower = sorted[n.div_ceil(3) - 1];
    let upper = sorted[(2 * n).div_ceil(3) - 1];
    Ok(base_rewards
        .iter()
        .map(|(task, &r)| {
            let band = if r <= lower {
                Band::Hard
            } else if r <= upper {
                Band::Medium
            } else {
                Band::Easy
            };
            (task.clone(), band)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub reward: f64,
    pub steps: usize,
    pub tokens: usize,
    pub per_step_reward: f64,
    pub deliberation_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskEval {
    pub fn from_trajectory(task_id: &str, traj: &Trajectory) -> Self {
        Self {
            task_id: task_id.to_string(),
            reward: traj.reward(),
            steps: traj.len(),
            tokens: traj.token_count(),
            per_step_reward: per_step_reward(traj.reward(), traj.len()).unwrap_or(0.0),
            deliberation_rate: deliberation_rate(traj),
            error: None,
        }
    }

    /// A failed task scores zero everywhere.
    pub fn failed(task_id: &str, error: impl Into<String>) -> Self {
        Self {
            task_id: task_id.to_string(),
            reward: 0.0,
            steps: 0,
            tokens: 0,
            per_step_reward: 0.0,
            deliberation_rate: 0.0,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub average_reward: f64,
    pub avg_per_step_reward: f64,
    pub avg_deliberation_rate: f64,
    pub avg_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
    pub averages: Averages,
}

impl EvalReport {
    /// Macro-averages every column over tasks.
    pub fn from_rows(per_task: Vec<TaskEval>) -> Result<Self, MetricsError> {
        if per_task.is_empty() {
            return Err(MetricsError::EmptyEvaluation);
        }
        let n = per_task.len() as f64;
        let mean = |f: fn(&TaskEval) -> f64| per_task.iter().map(f).sum::<f64>() / n;
        let averages = Averages {
            average_reward: mean(|t| t.reward),
            avg_per_step_reward: mean(|t| t.per_step_reward),
            avg_deliberation_rate: mean(|t| t.deliberation_rate),
            avg_tokens: mean(|t| t.tokens as f64),
        };
        Ok(Self { per_task, averages })
    }

    pub fn rewards(&self) -> BTreeMap<String, f64> {
        self.per_task
            .iter()
            .map(|t| (t.task_id.clone(), t.reward))
            .collect()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("# token counts are whitespace tokens; compare ratios only\n");
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>6} {:>7} {:>9} {:>7}",
            "task", "reward", "steps", "tokens", "r/step", "delib"
        );
        for t in &self.per_task {
            let _ = writeln!(
                out,
                "{:<24} {:>7.3} {:>6} {:>7} {:>9.4} {:>7.3}{}",
                t.task_id,
                t.reward,
                t.steps,
                t.tokens,
                t.per_step_reward,
                t.deliberation_rate,
                t.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
            );
        }
        let a = &self.averages;
        let _ = writeln!(
            out,
            "{:<24} {:>7.3} {:>6} {:>7.1} {:>9.4} {:>7.3}",
            "AVERAGE", a.average_reward, "", a.avg_tokens, a.avg_per_step_reward, a.avg_deliberation_rate
        );
        out
    }

    /// Per-band deliberation rates as CSV, one row per task.
    pub fn band_rows(&self, bands: &BTreeMap<String, Band>) -> String {
        let mut out = String::from("task_id,band,deliberation_rate,reward\n");
        for t in &self.per_task {
            if let Some(b) = bands.get(&t.task_id) {
                let _ = writeln!(out, "{},{:?},{},{}", t.task_id, b, t.deliberation_rate, t.reward);
            }
        }
        out
    }
}

/// Ratio of average tokens per task, `b / a`.
pub fn token_multiplier(report_a: &EvalReport, report_b: &EvalReport) -> Result<f64, MetricsError> {
    if report_a.per_task.is_empty() || report_b.per_task.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let denom = report_a.averages.avg_tokens;
    if denom == 0.0 {
        return Err(MetricsError::DivisionDomain("baseline averages zero tokens".into()));
    }
    Ok(report_b.averages.avg_tokens / denom)
}

pub fn format_multiplier(x: f64) -> String {
    format!("{x:.1}×")
}

/// Runs every task once at `temperature` and collects the report. A task
/// that fails scores zero and carries the error instead of aborting.
pub fn evaluate(
    p: &dyn Policy,
    backend: &dyn EnvBackend,
    specs: &[TaskSpec],
    temperature: f64,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport, MetricsError> {
    if specs.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let rows = exec.map(specs, |_, spec| {
        let run = || -> Result<Trajectory, String> {
            let (mut env, obs) = backend.reset(spec).map_err(|e| e.to_string())?;
            let h = History::new(spec.instruction.clone(), Some(obs));
            run_episode(
                p,
                env.as_mut(),
                h,
                temperature,
                derive_seed(seed, &[string_seed(spec.id())]),
            )
            .map_err(|e| e.to_string())
        };
        match run() {
            Ok(traj) => TaskEval::from_trajectory(spec.id(), &traj),
            Err(e) => TaskEval::failed(spec.id(), e),
        }
    });
    EvalReport::from_rows(rows)
}
