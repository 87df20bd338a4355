//! Seeded TextGrid task corpora, a planner that writes expert
//! demonstrations for them, and small tabular policies over those experts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::textgrid::{is_container, room_of, Location, TextGrid, WorldState, OBJECTS, RECEPTACLES, ROOMS};
use crate::env::{EnvError, Environment, Goal, RewardMode, Subgoal, TaskSpec, DEFAULT_MAX_STEPS};
use crate::exec::{derive_seed, string_seed};
use crate::policy::{Distribution, StepSample, TabularPolicy};
use crate::trajectory::{Action, Instruction, Split, Step, Thought, Trajectory};

fn weights(requires: &[Subgoal]) -> BTreeMap<Subgoal, f64> {
    let mut w = BTreeMap::from([(Subgoal::Locate, 0.2), (Subgoal::Hold, 0.2)]);
    let extra = 0.2 * requires.len() as f64;
    for s in requires {
        w.insert(*s, 0.2);
    }
    w.insert(Subgoal::Place, 0.6 - extra);
    w
}

/// `n` tasks: a target object, a goal receptacle that does not already hold
/// it, and at most one intermediate requirement.
pub fn generate_tasks(n: usize, seed: u64, mode: RewardMode) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| {
            let world_seed = derive_seed(seed, &[i as u64]);
            let world = WorldState::generate(world_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(world_seed, &[1]));
            let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
            let Some(Location::On(start)) = world.location_of(object) else {
                unreachable!("fresh worlds hold nothing")
            };
            let receptacle = loop {
                let r = RECEPTACLES[rng.random_range(0..RECEPTACLES.len())].0;
                if r != start {
                    break r;
                }
            };
            let requires = match rng.random_range(0..4) {
                0 => vec![Subgoal::Examine],
                1 => vec![Subgoal::Focus],
                _ => vec![],
            };
            let text = match requires.first() {
                Some(Subgoal::Examine) => format!("examine the {object}, then put it in/on the {receptacle}."),
                Some(_) => format!("focus on the {object}, then put it in/on the {receptacle}."),
                None => format!("put a {object} in/on the {receptacle}."),
            };
            let split = if i % 5 == 4 { Split::TestSeen } else { Split::Train };
            TaskSpec {
                instruction: Instruction::new(format!("tg-{seed}-{i:03}"), text, split)
                    .expect("non-empty text"),
                world_seed,
                goal: Goal {
                    object: object.to_string(),
                    receptacle: receptacle.to_string(),
                    weights: if mode == RewardMode::Granular { weights(&requires) } else { BTreeMap::new() },
                    requires,
                },
                reward_mode: mode,
                max_steps: DEFAULT_MAX_STEPS,
            }
        })
        .collect()
}

fn sample(thought: &str, action: String) -> StepSample {
    StepSample::new(
        Thought::plain(thought),
        Action::parse(&action).expect("planner actions are non-empty"),
    )
}

/// Shortest solution from the initial world: fetch, satisfy the
/// requirement, carry, place.
pub fn plan(spec: &TaskSpec) -> Vec<StepSample> {
    let world = WorldState::generate(spec.world_seed);
    let obj = spec.goal.object.as_str();
    let goal = spec.goal.receptacle.as_str();
    let Some(Location::On(src)) = world.location_of(obj) else {
        unreachable!("fresh worlds hold nothing")
    };
    let src_room = room_of(src).expect("catalog receptacle");
    let goal_room = room_of(goal).expect("validated receptacle");
    let mut out = Vec::new();
    let mut room = world.room.as_str();
    let mut opened = Vec::new();
    let mut lead = format!("I need to find the {obj} first.");
    let mut first = |out: &mut Vec<StepSample>, action: String| {
        out.push(sample(&lead, action));
        lead.clear();
    };
    if room != src_room {
        first(&mut out, format!("go to {src_room}"));
        room = src_room;
    }
    if is_container(src) {
        first(&mut out, format!("open {src}"));
        opened.push(src.as_str());
    }
    first(&mut out, format!("take {obj} from {src}"));
    for req in &spec.goal.requires {
        match req {
            Subgoal::Examine => out.push(sample("", format!("examine {obj}"))),
            Subgoal::Focus => out.push(sample("", format!("focus on {obj}"))),
            _ => {}
        }
    }
    if room != goal_room {
        out.push(sample("", format!("go to {goal_room}")));
    }
    if is_container(goal) && !opened.contains(&goal) {
        out.push(sample("", format!("open {goal}")));
    }
    out.push(sample(
        &format!("Now I can put the {obj} in/on the {goal}."),
        format!("put {obj} in/on {goal}"),
    ));
    out
}

/// Executes `samples` in a fresh episode, recording observations and the
/// final score. The episode must terminate on the last sample.
pub fn run_script(spec: &TaskSpec, samples: &[StepSample]) -> Result<Trajectory, EnvError> {
    let (mut env, _) = TextGrid::open(spec)?;
    let mut steps = Vec::new();
    for s in samples {
        let out = env.step(&s.action)?;
        steps.push(Step::new(s.thought.clone(), s.action.clone(), Some(out.observation)));
    }
    let reward = env.score()?;
    Trajectory::new(spec.instruction.clone(), steps, reward)
        .map_err(|e| EnvError::InvalidTask(e.to_string()))
}

pub fn expert_trajectory(spec: &TaskSpec) -> Result<Trajectory, EnvError> {
    run_script(spec, &plan(spec))
}

pub fn expert_corpus(
    n: usize,
    seed: u64,
    mode: RewardMode,
) -> Result<(Vec<TaskSpec>, Vec<Trajectory>), EnvError> {
    let specs = generate_tasks(n, seed, mode);
    let experts = specs.iter().map(expert_trajectory).collect::<Result<_, _>>()?;
    Ok((specs, experts))
}

fn distractor(id: &str, t: usize, expert: &Action) -> String {
    let pick = derive_seed(string_seed(id), &[t as u64]);
    let options: Vec<String> = ROOMS
        .iter()
        .map(|r| format!("go to {r}"))
        .chain(RECEPTACLES.iter().map(|(r, _, _)| format!("examine {r}")))
        .filter(|a| a != expert.canonical())
        .collect();
    options[(pick % options.len() as u64) as usize].clone()
}

/// Follows each expert with probability `follow` and otherwise proposes a
/// task-specific distractor. Off-expert histories fall back to wandering
/// between rooms. `follow = 1` is the point mass on the expert.
pub fn expert_policy(experts: &[Trajectory], follow: f64) -> TabularPolicy {
    let wander = Distribution::uniform(
        ROOMS
            .iter()
            .map(|r| StepSample::action_only(Action::parse(&format!("go to {r}")).expect("room")))
            .collect(),
    )
    .expect("non-empty");
    let mut p = TabularPolicy::new(Some(wander));
    for e in experts {
        for (t, step) in e.steps().iter().enumerate() {
            let key = e.steps()[..t].iter().map(|s| s.action.canonical().to_string()).collect();
            let dist = if follow >= 1.0 {
                Distribution::point(step.sample())
            } else {
                let other = distractor(e.id(), t, &step.action);
                Distribution::new(vec![
                    (step.sample(), follow),
                    (StepSample::action_only(Action::parse(&other).expect("non-empty")), 1.0 - follow),
                ])
                .expect("two masses summing to 1")
            };
            p.insert(Some(e.id().to_string()), key, dist);
        }
    }
    p
}

/// A granular task whose demonstration wastes its step budget (reward 0.5)
/// while a different second action completes it (reward 1.0).
#[derive(Debug, Clone)]
pub struct SwitchScenario {
    pub spec: TaskSpec,
    pub expert: Trajectory,
    /// Index of the step where the better alternative branches off.
    pub branch: usize,
    pub alternative: Action,
    /// Proposes the alternative at the branch and then finishes the task.
    pub policy: TabularPolicy,
}

pub fn switch_scenario() -> SwitchScenario {
    let world_seed = (0u64..)
        .find(|s| WorldState::generate(*s).location_of("apple") == Some(&Location::On("shelf".into())))
        .expect("some seed puts the apple on the shelf");
    let spec = TaskSpec {
        instruction: Instruction::new("switch-apple", "put an apple in/on the table.", Split::Train)
            .expect("text"),
        world_seed,
        goal: Goal {
            object: "apple".into(),
            receptacle: "table".into(),
            requires: vec![],
            weights: BTreeMap::from([(Subgoal::Locate, 0.25), (Subgoal::Hold, 0.25), (Subgoal::Place, 0.5)]),
        },
        reward_mode: RewardMode::Granular,
        max_steps: 3,
    };
    let demo = [
        sample("I need to find the apple first.", "take apple from shelf".into()),
        sample("", "go to bedroom".into()),
        sample("", "go to kitchen".into()),
    ];
    let expert = run_script(&spec, &demo).expect("scenario demo runs");
    let alternative = Action::parse("go to kitchen").expect("action");
    let policy = TabularPolicy::new(None)
        .with_task_state(
            "switch-apple",
            &[],
            Distribution::point(demo[0].clone()),
        )
        .with_task_state(
            "switch-apple",
            &["take apple from shelf"],
            Distribution::over_actions(&[("go to kitchen", 0.5), ("go to bedroom", 0.5)]).expect("dist"),
        )
        .with_task_state(
            "switch-apple",
            &["take apple from shelf", "go to kitchen"],
            Distribution::over_actions(&[("put apple in/on table", 1.0)]).expect("dist"),
        )
        .with_task_state(
            "switch-apple",
            &["take apple from shelf", "go to bedroom"],
            Distribution::over_actions(&[("go to kitchen", 1.0)]).expect("dist"),
        );
    SwitchScenario {
        spec,
        expert,
        branch: 1,
        alternative,
        policy,
    }
}
