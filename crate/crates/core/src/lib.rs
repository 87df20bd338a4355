//! Deliberation trajectory synthesis for LLM agents.
//!
//! The engine replays expert trajectories, samples candidate actions from the
//! current policy at every step, rolls out and critiques each distinct
//! candidate when the samples disagree, and synthesizes a deliberation thought
//! that weighs the candidates before committing to the ground-truth action.
//! The resulting datasets are written out for an external trainer and fed back
//! as the expert data of the next iteration.
//!
//! Everything runs hermetically against the built-in [`env::textgrid`] world
//! and the deterministic policy backends in [`policy`]; remote environments and
//! chat-completion models plug in through [`env::remote`] and
//! [`policy::remote`].

pub mod cli;
pub mod critique;
pub mod dataset;
pub mod env;
pub mod exec;
pub mod fixtures;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod prompt;
pub mod rollout;
pub mod sampler;
pub mod synthesis;
pub mod testkit;
pub mod trajectory;

pub use trajectory::{
    canonicalize, Action, DeliberationStep, DeliberationTrajectory, History, Instruction,
    Observation, Split, Step, Thought, ThoughtKind, Trajectory,
};
