//! TextGrid: a small deterministic household world.
//!
//! Three rooms hold a fixed set of receptacles; a seeded RNG scatters the
//! object catalog over them. The action grammar is
//!
//! ```text
//! go to <room>
//! open <receptacle> / close <receptacle>
//! take <object> from <receptacle>
//! put <object> in|on|in/on <receptacle>
//! examine <object|receptacle>
//! focus on <object>
//! ```
//!
//! Anything else, or any action whose preconditions fail, yields
//! `"Nothing happened"` and leaves the world unchanged.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvBackend, EnvError, EnvOutcome, Environment, RewardMode, Subgoal, TaskSpec, NOTHING_HAPPENED};
use crate::trajectory::{Action, Observation};

pub const START_ROOM: &str = "hallway";

pub const ROOMS: [&str; 3] = ["hallway", "kitchen", "bedroom"];

/// (name, room, is_container)
pub const RECEPTACLES: [(&str, &str, bool); 9] = [
    ("shelf", "hallway", false),
    ("closet", "hallway", true),
    ("table", "kitchen", false),
    ("countertop", "kitchen", false),
    ("fridge", "kitchen", true),
    ("cabinet", "kitchen", true),
    ("desk", "bedroom", false),
    ("bed", "bedroom", false),
    ("drawer", "bedroom", true),
];

pub const OBJECTS: [&str; 8] = ["apple", "egg", "mug", "bowl", "book", "pen", "key", "cloth"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Location {
    On(String),
    Held,
}

/// Everything an action can change. Step counters live outside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    pub room: String,
    pub locations: BTreeMap<String, Location>,
    pub open: BTreeMap<String, bool>,
    pub achieved: BTreeSet<Subgoal>,
}

impl WorldState {
    /// Initial world for a seed: every object on a uniformly drawn
    /// receptacle, all containers closed.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locations = OBJECTS
            .iter()
            .map(|o| {
                let r = RECEPTACLES[rng.random_range(0..RECEPTACLES.len())].0;
                (o.to_string(), Location::On(r.to_string()))
            })
            .collect();
        let open = RECEPTACLES
            .iter()
            .filter(|(_, _, c)| *c)
            .map(|(n, _, _)| (n.to_string(), false))
            .collect();
        Self {
            room: START_ROOM.to_string(),
            locations,
            open,
            achieved: BTreeSet::new(),
        }
    }

    pub fn held(&self) -> Option<&str> {
        self.locations
            .iter()
            .find(|(_, l)| **l == Location::Held)
            .map(|(o, _)| o.as_str())
    }

    pub fn location_of(&self, object: &str) -> Option<&Location> {
        self.locations.get(object)
    }

    fn accessible(&self, receptacle: &str) -> bool {
        self.open.get(receptacle).copied().unwrap_or(true)
    }

    fn contents(&self, receptacle: &str) -> Vec<&str> {
        OBJECTS
            .iter()
            .copied()
            .filter(|o| self.locations.get(*o) == Some(&Location::On(receptacle.to_string())))
            .collect()
    }

    fn visible(&self, object: &str) -> bool {
        match self.locations.get(object) {
            Some(Location::Held) => true,
            Some(Location::On(r)) => room_of(r) == Some(self.room.as_str()) && self.accessible(r),
            None => false,
        }
    }

    pub fn describe_room(&self) -> String {
        let here: Vec<&str> = receptacles_in(&self.room).collect();
        let mut out = format!(
            "You are in the {}. Here you see {}.",
            self.room,
            list_with_articles(&here)
        );
        for r in here {
            if is_container(r) && !self.accessible(r) {
                out.push_str(&format!(" The {r} is closed."));
            } else if is_container(r) {
                out.push_str(&format!(" The {r} is open. In it, you see {}.", self.contents_text(r)));
            } else {
                out.push_str(&format!(" On the {r}, you see {}.", self.contents_text(r)));
            }
        }
        out
    }

    fn contents_text(&self, receptacle: &str) -> String {
        let items = self.contents(receptacle);
        if items.is_empty() {
            "nothing".to_string()
        } else {
            list_with_articles(&items)
        }
    }
}

pub fn room_of(receptacle: &str) -> Option<&'static str> {
    RECEPTACLES
        .iter()
        .find(|(n, _, _)| *n == receptacle)
        .map(|(_, room, _)| *room)
}

pub fn is_container(receptacle: &str) -> bool {
    RECEPTACLES.iter().any(|(n, _, c)| *n == receptacle && *c)
}

pub fn receptacles_in(room: &str) -> impl Iterator<Item = &'static str> + '_ {
    RECEPTACLES
        .iter()
        .filter(move |(_, r, _)| *r == room)
        .map(|(n, _, _)| *n)
}

fn with_article(name: &str) -> String {
    let article = if name.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    };
    format!("{article} {name}")
}

fn list_with_articles(names: &[&str]) -> String {
    let items: Vec<String> = names.iter().map(|n| with_article(n)).collect();
    match items.len() {
        0 => "nothing".to_string(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// Backend that creates [`TextGridEnv`] episodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextGrid;

impl TextGrid {
    pub fn validate(spec: &TaskSpec) -> Result<(), EnvError> {
        spec.validate_shape()?;
        if !OBJECTS.contains(&spec.goal.object.as_str()) {
            return Err(EnvError::InvalidTask(format!(
                "unknown object {:?}",
                spec.goal.object
            )));
        }
        if room_of(&spec.goal.receptacle).is_none() {
            return Err(EnvError::InvalidTask(format!(
                "unknown receptacle {:?}",
                spec.goal.receptacle
            )));
        }
        Ok(())
    }

    pub fn open(spec: &TaskSpec) -> Result<(TextGridEnv, Observation), EnvError> {
        Self::validate(spec)?;
        let state = WorldState::generate(spec.world_seed);
        let observation = Observation::new(state.describe_room());
        Ok((
            TextGridEnv {
                spec: spec.clone(),
                state,
                steps_taken: 0,
                terminated: false,
            },
            observation,
        ))
    }
}

impl EnvBackend for TextGrid {
    fn reset(&self, spec: &TaskSpec) -> Result<(Box<dyn Environment>, Observation), EnvError> {
        let (env, obs) = Self::open(spec)?;
        Ok((Box::new(env), obs))
    }
}

#[derive(Debug, Clone)]
pub struct TextGridEnv {
    spec: TaskSpec,
    state: WorldState,
    steps_taken: usize,
    terminated: bool,
}

enum Verb<'a> {
    GoTo(&'a str),
    Open(&'a str),
    Close(&'a str),
    Take(&'a str, &'a str),
    Put(&'a str, &'a str),
    Examine(&'a str),
    Focus(&'a str),
}

fn parse_verb(action: &str) -> Option<Verb<'_>> {
    if let Some(rest) = action.strip_prefix("go to ") {
        return Some(Verb::GoTo(rest));
    }
    if let Some(rest) = action.strip_prefix("focus on ") {
        return Some(Verb::Focus(rest));
    }
    if let Some(rest) = action.strip_prefix("open ") {
        return Some(Verb::Open(rest));
    }
    if let Some(rest) = action.strip_prefix("close ") {
        return Some(Verb::Close(rest));
    }
    if let Some(rest) = action.strip_prefix("examine ") {
        return Some(Verb::Examine(rest));
    }
    if let Some(rest) = action.strip_prefix("take ") {
        let (obj, rec) = rest.split_once(" from ")?;
        return Some(Verb::Take(obj, rec));
    }
    if let Some(rest) = action.strip_prefix("put ") {
        for prep in [" in/on ", " in ", " on "] {
            if let Some((obj, rec)) = rest.split_once(prep) {
                return Some(Verb::Put(obj, rec));
            }
        }
    }
    None
}

impl TextGridEnv {
    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    /// Goal predicate: target placed and every required intermediate state
    /// reached.
    pub fn success(&self) -> bool {
        let goal = &self.spec.goal;
        self.state.achieved.contains(&Subgoal::Place)
            && self.state.location_of(&goal.object)
                == Some(&Location::On(goal.receptacle.clone()))
            && goal.requires.iter().all(|s| self.state.achieved.contains(s))
    }

    fn current_score(&self) -> f64 {
        match self.spec.reward_mode {
            RewardMode::Binary => {
                if self.success() {
                    1.0
                } else {
                    0.0
                }
            }
            RewardMode::Granular => {
                let s: f64 = self
                    .spec
                    .goal
                    .weights
                    .iter()
                    .filter(|(sub, _)| self.state.achieved.contains(sub))
                    .map(|(_, w)| w)
                    .sum();
                s.clamp(0.0, 1.0)
            }
        }
    }

    fn in_room(&self, receptacle: &str) -> bool {
        room_of(receptacle) == Some(self.state.room.as_str())
    }

    /// Applies a valid action and returns its feedback; `None` leaves the
    /// state untouched.
    fn apply(&mut self, action: &str) -> Option<String> {
        let target = self.spec.goal.object.clone();
        let s = &mut self.state;
        let text = match parse_verb(action)? {
            Verb::GoTo(room) => {
                if !ROOMS.contains(&room) {
                    return None;
                }
                s.room = room.to_string();
                s.describe_room()
            }
            Verb::Open(r) => {
                if !(is_container(r) && self.in_room(r)) || self.state.open[r] {
                    return None;
                }
                let s = &mut self.state;
                s.open.insert(r.to_string(), true);
                format!("You open the {r}. In it, you see {}.", s.contents_text(r))
            }
            Verb::Close(r) => {
                if !(is_container(r) && self.in_room(r)) || !self.state.open[r] {
                    return None;
                }
                self.state.open.insert(r.to_string(), false);
                format!("You close the {r}.")
            }
            Verb::Take(o, r) => {
                if !self.in_room(r) || !self.state.accessible(r) || self.state.held().is_some() {
                    return None;
                }
                if self.state.locations.get(o) != Some(&Location::On(r.to_string())) {
                    return None;
                }
                self.state.locations.insert(o.to_string(), Location::Held);
                format!("You pick up the {o} from the {r}.")
            }
            Verb::Put(o, r) => {
                if room_of(r).is_none() || !self.in_room(r) || !self.state.accessible(r) {
                    return None;
                }
                if self.state.locations.get(o) != Some(&Location::Held) {
                    return None;
                }
                self.state
                    .locations
                    .insert(o.to_string(), Location::On(r.to_string()));
                if o == target && r == self.spec.goal.receptacle {
                    self.state.achieved.insert(Subgoal::Place);
                }
                format!("You put the {o} in/on the {r}.")
            }
            Verb::Examine(x) => {
                if room_of(x).is_some() {
                    if !self.in_room(x) {
                        return None;
                    }
                    if self.state.accessible(x) {
                        let prep = if is_container(x) { "In" } else { "On" };
                        format!("{prep} the {x}, you see {}.", self.state.contents_text(x))
                    } else {
                        format!("The {x} is closed.")
                    }
                } else if OBJECTS.contains(&x) && self.state.visible(x) {
                    if x == target {
                        self.state.achieved.insert(Subgoal::Examine);
                    }
                    format!("There's nothing special about the {x}.")
                } else {
                    return None;
                }
            }
            Verb::Focus(o) => {
                if !(OBJECTS.contains(&o) && self.state.visible(o)) {
                    return None;
                }
                if o == target {
                    self.state.achieved.insert(Subgoal::Focus);
                }
                format!("You focus on the {o}.")
            }
        };
        let s = &mut self.state;
        if s.visible(&target) {
            s.achieved.insert(Subgoal::Locate);
        }
        if s.locations.get(&target) == Some(&Location::Held) {
            s.achieved.insert(Subgoal::Hold);
        }
        Some(text)
    }
}

impl Environment for TextGridEnv {
    fn step(&mut self, action: &Action) -> Result<EnvOutcome, EnvError> {
        if self.terminated {
            return Err(EnvError::EpisodeClosed);
        }
        self.steps_taken += 1;
        let text = self
            .apply(action.canonical())
            .unwrap_or_else(|| NOTHING_HAPPENED.to_string());
        let done = self.success() || self.steps_taken >= self.spec.max_steps;
        if done {
            self.terminated = true;
        }
        Ok(EnvOutcome {
            observation: Observation::new(text),
            done,
            reward_if_done: done.then(|| self.current_score()),
        })
    }

    fn score(&mut self) -> Result<f64, EnvError> {
        if !self.terminated {
            return Err(EnvError::EpisodeOpen);
        }
        Ok(self.current_score())
    }

    fn terminated(&self) -> bool {
        self.terminated
    }

    fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn snapshot(&self) -> Option<WorldState> {
        Some(self.state.clone())
    }
}
