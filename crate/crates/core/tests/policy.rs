use std::collections::BTreeMap;
use std::time::Duration;

use proptest::prelude::*;
use sand_core::env::remote::parse_response;
use sand_core::env::textgrid::TextGrid;
use sand_core::env::{EnvBackend, EnvError, Goal, RewardMode, TaskSpec, NOTHING_HAPPENED};
use sand_core::fixtures::expert_corpus;
use sand_core::policy::{
    greedy_rollout, BaseModel, Distribution, Policy, PolicyError, RemoteChatClient, RemoteChatConfig, ScorablePolicy,
    ScriptedPolicy, StepSample, TabularPolicy, TemplateStubBase, TemplateStubPolicy,
};
use sand_core::testkit::{ChatServer, FaultConfig};
use sand_core::trajectory::{trajectory_log_prob, LogProb};
use sand_core::{canonicalize, Action, History, Instruction, Observation, Split, Step, Thought, Trajectory};

fn act(a: &str) -> Action {
    Action::parse(a).unwrap()
}

fn instr() -> Instruction {
    Instruction::new("p", "put a key in/on the desk.", Split::Train).unwrap()
}

fn traj(actions: &[&str]) -> Trajectory {
    let last = actions.len() - 1;
    let steps = actions
        .iter()
        .enumerate()
        .map(|(i, a)| Step::new(Thought::empty(), act(a), (i < last).then(|| Observation::new("ok"))))
        .collect();
    Trajectory::new(instr(), steps, 1.0).unwrap()
}

fn dist(pairs: &[(&str, f64)]) -> Distribution {
    Distribution::over_actions(pairs).unwrap()
}

#[test]
fn log_prob_of_two_halves() {
    let p = TabularPolicy::stationary(dist(&[("a", 0.5), ("b", 0.5)]));
    let lp = trajectory_log_prob(&p, &traj(&["a", "b"])).unwrap().value();
    assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    assert!((lp + 1.3863).abs() < 1e-4);
}

#[test]
fn point_mass_expert_scores_zero() {
    let (_, experts) = expert_corpus(3, 1, RewardMode::Binary).unwrap();
    let p = sand_core::fixtures::expert_policy(&experts, 1.0);
    for e in &experts {
        assert_eq!(trajectory_log_prob(&p, e).unwrap(), LogProb::Finite(0.0));
    }
}

/// Three-step table whose path `a, b, c` has masses 0.9, 0.5, 0.2.
fn three_step_table() -> TabularPolicy {
    TabularPolicy::new(None)
        .with_state(&[], dist(&[("a", 0.9), ("x", 0.1)]))
        .with_state(&["a"], dist(&[("b", 0.5), ("x", 0.5)]))
        .with_state(&["x"], dist(&[("b", 1.0)]))
        .with_state(&["a", "b"], dist(&[("c", 0.2), ("x", 0.8)]))
        .with_state(&["a", "x"], dist(&[("c", 0.6), ("b", 0.4)]))
        .with_state(&["x", "b"], dist(&[("c", 1.0)]))
}

#[test]
fn three_step_value_and_normalization() {
    let p = three_step_table();
    let lp = trajectory_log_prob(&p, &traj(&["a", "b", "c"])).unwrap().value();
    assert!((lp - 0.09f64.ln()).abs() < 1e-12);
    assert!((lp + 2.4079).abs() < 1e-4);

    // Enumerate every depth-3 path the table supports.
    let mut total = 0.0;
    let mut frontier: Vec<Vec<String>> = vec![vec![]];
    for _ in 0..3 {
        frontier = frontier
            .into_iter()
            .flat_map(|prefix| {
                let h = {
                    let mut h = History::new(instr(), None);
                    for a in &prefix {
                        h.push(Step::new(Thought::empty(), act(a), Some(Observation::new("ok"))));
                    }
                    h
                };
                p.distribution(&h)
                    .unwrap()
                    .entries()
                    .iter()
                    .map(|(s, _)| {
                        let mut next = prefix.clone();
                        next.push(s.action.canonical().to_string());
                        next
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    for path in &frontier {
        let names: Vec<&str> = path.iter().map(String::as_str).collect();
        total += trajectory_log_prob(&p, &traj(&names)).unwrap().prob();
    }
    assert_eq!(frontier.len(), 5);
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn score_step_cases() {
    let h = History::new(instr(), None);
    let point = TabularPolicy::stationary(Distribution::point(StepSample::action_only(act("look"))));
    assert_eq!(point.score_step(&h, &StepSample::action_only(act("look"))).unwrap(), LogProb::Finite(0.0));
    assert_eq!(point.score_step(&h, &StepSample::action_only(act("go to kitchen"))).unwrap(), LogProb::OffSupport);
    let q = TabularPolicy::stationary(dist(&[("a", 0.25), ("b", 0.75)]));
    assert_eq!(q.score_step(&h, &StepSample::action_only(act("a"))).unwrap(), LogProb::Finite(0.25f64.ln()));
    assert_eq!(LogProb::OffSupport.prob(), 0.0);
}

#[test]
fn point_mass_ignores_seed() {
    let h = History::new(instr(), None);
    let p = TabularPolicy::stationary(Distribution::point(StepSample::new(Thought::plain("go"), act("look"))));
    let first = p.sample_step(&h, 1.0, 0).unwrap();
    for seed in 1..200 {
        assert_eq!(p.sample_step(&h, 1.0, seed).unwrap(), first);
    }
}

#[test]
fn fair_coin_frequencies() {
    let h = History::new(instr(), None);
    let p = TabularPolicy::stationary(dist(&[("a", 0.5), ("b", 0.5)]));
    let a = (1..=1000u64)
        .filter(|s| p.sample_step(&h, 1.0, *s).unwrap().action == act("a"))
        .count();
    let freq = a as f64 / 1000.0;
    assert!((freq - 0.5).abs() <= 0.05, "{freq}");
}

#[test]
fn temperature_zero_is_argmax() {
    let h = History::new(instr(), None);
    let p = TabularPolicy::stationary(dist(&[("b", 0.3), ("a", 0.7)]));
    for seed in 0..100 {
        assert_eq!(p.sample_step(&h, 0.0, seed).unwrap().action, act("a"));
    }
}

#[test]
fn tempering_flattens_the_mode() {
    let d = dist(&[("a", 0.6), ("b", 0.3), ("c", 0.1)]);
    let max = |t: f64| d.tempered(t).into_iter().fold(0.0, f64::max);
    assert!(max(0.5) > max(1.0));
    assert!(max(1.0) > max(2.0));
    assert_eq!(d.tempered(1.0), vec![0.6, 0.3, 0.1]);
}

fn key_spec(max_steps: usize) -> TaskSpec {
    TaskSpec {
        instruction: instr(),
        world_seed: 7,
        goal: Goal {
            object: "key".into(),
            receptacle: "desk".into(),
            requires: vec![],
            weights: BTreeMap::new(),
        },
        reward_mode: RewardMode::Binary,
        max_steps,
    }
}

#[test]
fn scripted_expert_reproduces_itself() {
    let (specs, experts) = expert_corpus(5, 3, RewardMode::Binary).unwrap();
    let p = ScriptedPolicy::from_trajectories(&experts);
    for (spec, e) in specs.iter().zip(&experts) {
        let (mut env, obs) = TextGrid.reset(spec).unwrap();
        let t = greedy_rollout(&p, env.as_mut(), History::new(spec.instruction.clone(), Some(obs)), 0).unwrap();
        assert_eq!(t.steps(), e.steps());
        assert_eq!(t.reward(), e.reward());
    }
}

#[test]
fn invalid_stub_runs_out_the_budget() {
    let p = TemplateStubPolicy::new("hmm", "juggle the fridge").unwrap();
    let spec = key_spec(6);
    let (mut env, obs) = TextGrid.reset(&spec).unwrap();
    let t = greedy_rollout(&p, env.as_mut(), History::new(instr(), Some(obs)), 0).unwrap();
    assert_eq!(t.len(), 6);
    assert!(t.steps().iter().all(|s| s.observation.as_ref().unwrap().0 == NOTHING_HAPPENED));
    assert_eq!(t.reward(), 0.0);
}

#[test]
fn greedy_follows_the_most_likely_path() {
    type Row<'a> = (&'a [&'a str], &'a [(&'a str, f64)]);
    let table: [Row; 3] = [
        (&[], &[("go to kitchen", 0.4), ("take key from shelf", 0.6)]),
        (&["take key from shelf"], &[("go to bedroom", 0.3), ("look", 0.7)]),
        (&["go to kitchen"], &[("look", 1.0)]),
    ];
    let mut p = TabularPolicy::new(None);
    for (k, d) in table {
        p = p.with_state(k, dist(d));
    }
    // Brute-force argmax over the two-step paths.
    let mut best = (0.0, vec![]);
    for (a, pa) in table[0].1 {
        let next = table.iter().find(|(k, _)| k == &[*a]).unwrap().1;
        for (b, pb) in next {
            if pa * pb > best.0 {
                best = (pa * pb, vec![act(a), act(b)]);
            }
        }
    }
    let (mut env, obs) = TextGrid.reset(&key_spec(2)).unwrap();
    let t = greedy_rollout(&p, env.as_mut(), History::new(instr(), Some(obs)), 9).unwrap();
    assert_eq!(t.actions().cloned().collect::<Vec<_>>(), best.1);
}

#[test]
fn stub_base_contract() {
    let critique = "### Private Mental Simulations\nYou quietly imagined several futures that all start with the action **open fridge**.\nAction: open fridge\nObservation: done\nFinal reward: 1.0\n";
    let out = TemplateStubBase.complete_text(critique, 0.0).unwrap();
    assert!(out.starts_with("Action Evaluation:"));
    assert!(out.contains("1.0"));
    assert_eq!(out, TemplateStubBase.complete_text(critique, 0.0).unwrap());

    let delib = "### Private Scratch-pad\nnotes:\n- open fridge: good. more\n- look: idle.\n- go to bed: far.\n\n### Very Important\nYour final **Action** line must be **look**.";
    let out = TemplateStubBase.complete_text(delib, 0.0).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("- ")).count(), 3);
    assert!(out.starts_with("Thought: "));
}

#[test]
fn remote_client_round_trip_and_outage() {
    let server = ChatServer::spawn(FaultConfig::healthy()).unwrap();
    let client = RemoteChatClient::new(RemoteChatConfig::new(server.api_base(), "m"));
    let prompt = "Final reward: 0.0\n### Private Mental Simulations\nstart with the action **look**";
    assert_eq!(
        client.complete_text(prompt, 0.0).unwrap(),
        TemplateStubBase.complete_text(prompt, 0.0).unwrap()
    );

    let down = ChatServer::spawn(FaultConfig::outage()).unwrap();
    let mut cfg = RemoteChatConfig::new(down.api_base(), "m");
    cfg.retries = 2;
    cfg.backoff_ms = 1;
    let client = RemoteChatClient::new(cfg);
    assert!(matches!(client.complete_text("hi", 0.0), Err(PolicyError::PolicyUnavailable(_))));
    assert_eq!(down.requests(), 3);
}

#[test]
fn remote_client_times_out_on_stalls() {
    let server = ChatServer::spawn(FaultConfig {
        timeout_rate: 1.0,
        stall: Duration::from_millis(500),
        ..FaultConfig::healthy()
    })
    .unwrap();
    let mut cfg = RemoteChatConfig::new(server.api_base(), "m");
    cfg.retries = 0;
    cfg.timeout_ms = 100;
    let client = RemoteChatClient::new(cfg);
    assert!(matches!(client.complete_text("hi", 0.0), Err(PolicyError::PolicyUnavailable(_))));
}

#[test]
fn wire_reply_without_observation() {
    assert!(matches!(parse_response(r#"{"done": false}"#), Err(EnvError::ProtocolError(_))));
    assert!(matches!(parse_response(r#"{"observation": "x", "done": true, "reward": 1.5}"#), Err(EnvError::ProtocolError(_))));
    assert_eq!(parse_response(r#"{"observation": "x", "done": false}"#).unwrap().observation, "x");
}

proptest! {
    #[test]
    fn canonicalize_is_idempotent(raw in "[A-Za-z .]{0,24}") {
        if let Ok(a) = canonicalize(&raw) {
            let again = canonicalize(a.canonical()).unwrap();
            prop_assert_eq!(again.canonical(), a.canonical());
            prop_assert_eq!(&again, &a);
        }
    }

    #[test]
    fn local_sampling_is_reproducible(seed in any::<u64>(), t in 0.1f64..3.0) {
        let h = History::new(instr(), None);
        let p = TabularPolicy::stationary(dist(&[("a", 0.2), ("b", 0.5), ("c", 0.3)]));
        prop_assert_eq!(p.sample_step(&h, t, seed).unwrap(), p.sample_step(&h, t, seed).unwrap());
    }
}
