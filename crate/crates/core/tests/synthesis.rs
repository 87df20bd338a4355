use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sand_core::critique::{build_critique_prompt, critique_all, generate_critique, parse_critique, CritiqueError};
use sand_core::env::textgrid::TextGrid;
use sand_core::env::{EnvBackend, EnvError, Environment, RewardMode, TaskSpec};
use sand_core::exec::{derive_seed, Execution};
use sand_core::fixtures::{expert_corpus, expert_policy, run_script, switch_scenario};
use sand_core::pipeline::{synthesize_dataset, synthesize_trajectory, trajectory_seed, Backends, SynthesisConfig};
use sand_core::policy::{
    BaseModel, Distribution, PolicyError, ScriptedPolicy, StepSample, TabularPolicy, TemplateStubBase,
    TemplateStubPolicy,
};
use sand_core::rollout::{execute, expert_tail, rollout_unique, RolloutError, RolloutRecord};
use sand_core::sampler::{needs_deliberation, sample_candidates, scan_trajectory, step_seed, CandidateSet, SamplerError};
use sand_core::synthesis::{
    assemble, build_deliberation_prompt, decide_switch, synthesize, DeliberationDraft, StepPlan, SwitchDecision,
    SynthesisError,
};
use sand_core::{Action, History, Observation, ThoughtKind, Trajectory};

fn act(a: &str) -> Action {
    Action::parse(a).unwrap()
}

fn only(a: &str) -> StepSample {
    StepSample::action_only(act(a))
}

fn five_step() -> (TaskSpec, Trajectory) {
    let (specs, experts) = expert_corpus(40, 5, RewardMode::Binary).unwrap();
    specs
        .into_iter()
        .zip(experts)
        .find(|(_, e)| e.len() == 5)
        .expect("a five-step expert")
}

fn history(spec: &TaskSpec, e: &Trajectory, t: usize) -> History {
    let (_, obs) = TextGrid.reset(spec).unwrap();
    History::expert_prefix(e, Some(obs), t)
}

// ---- sampler ----

#[test]
fn point_mass_sampler_has_one_unique() {
    let (spec, e) = five_step();
    let p = expert_policy(std::slice::from_ref(&e), 1.0);
    let h = history(&spec, &e, 2);
    let c = sample_candidates(&p, &h, &e.steps()[2], 5, 1.0, 9).unwrap();
    assert_eq!(c.unique_actions, vec![(e.steps()[2].action.clone(), 6)]);
    assert!(!needs_deliberation(&c));
}

#[test]
fn coin_sampler_matches_hand_replay() {
    let (spec, e) = five_step();
    let expert = e.steps()[0].action.clone();
    let p = TabularPolicy::stationary(
        Distribution::new(vec![(StepSample::action_only(expert.clone()), 0.5), (only("look"), 0.5)]).unwrap(),
    );
    let c = sample_candidates(&p, &history(&spec, &e, 0), &e.steps()[0], 5, 1.0, 3).unwrap();
    // Draw i uses u ~ U[0,1) from ChaCha8 seeded with derive_seed(3, [i]).
    let mut expert_count = 1;
    let mut alt = 0;
    for i in 0..5u64 {
        let u: f64 = ChaCha8Rng::seed_from_u64(derive_seed(3, &[i])).random();
        if u < 0.5 {
            expert_count += 1;
        } else {
            alt += 1;
        }
    }
    let counts: BTreeMap<String, usize> = c
        .unique_actions
        .iter()
        .map(|(a, n)| (a.canonical().to_string(), *n))
        .collect();
    assert_eq!(counts.get(expert.canonical()).copied(), Some(expert_count));
    assert_eq!(counts.get("look").copied().unwrap_or(0), alt);
    assert!(alt > 0 && expert_count > 1, "seed 3 should draw both");
}

#[test]
fn zero_samples_rejected() {
    let (spec, e) = five_step();
    let p = TemplateStubPolicy::new("", "look").unwrap();
    assert_eq!(
        sample_candidates(&p, &history(&spec, &e, 0), &e.steps()[0], 0, 1.0, 0),
        Err(SamplerError::ZeroSamples)
    );
}

#[test]
fn indicator_examples() {
    let same = CandidateSet::new(0, only("a"), vec![only("a"); 5]);
    assert!(!needs_deliberation(&same));
    let two = CandidateSet::new(0, only("b"), vec![only("a"); 5]);
    assert!(needs_deliberation(&two));
    let all = CandidateSet::new(0, only("f"), ["a", "b", "c", "d", "e"].map(only).to_vec());
    assert!(needs_deliberation(&all));
    assert_eq!(all.unique_count(), 6);
}

#[test]
fn scan_with_point_mass_flags_nothing() {
    let (spec, e) = five_step();
    let p = expert_policy(std::slice::from_ref(&e), 1.0);
    let sets = scan_trajectory(&p, &TextGrid, &spec, &e, 5, 1.0, 4).unwrap();
    assert_eq!(sets.len(), 5);
    assert!(sets.iter().all(|c| !needs_deliberation(c)));
}

#[test]
fn scan_with_uniform_policy_flags_everything() {
    let (spec, e) = five_step();
    let p = TabularPolicy::stationary(Distribution::over_actions(&[("look", 1.0 / 3.0), ("inventory", 1.0 / 3.0), ("go to kitchen", 1.0 / 3.0)]).unwrap());
    let sets = scan_trajectory(&p, &TextGrid, &spec, &e, 5, 1.0, 17).unwrap();
    for (t, c) in sets.iter().enumerate() {
        assert!(needs_deliberation(c), "step {t}");
        let direct = sample_candidates(&p, &history(&spec, &e, t), &e.steps()[t], 5, 1.0, step_seed(17, t)).unwrap();
        assert_eq!(&direct, c);
    }
}

#[test]
fn scan_reports_divergence() {
    let (spec, e) = five_step();
    let mut steps = e.steps().to_vec();
    steps[1].observation = Some(Observation::new("garbled"));
    let bad = Trajectory::new(e.instruction().clone(), steps, e.reward()).unwrap();
    let p = TemplateStubPolicy::new("", "look").unwrap();
    match scan_trajectory(&p, &TextGrid, &spec, &bad, 3, 1.0, 0) {
        Err(SamplerError::Env(EnvError::ReplayDivergence { step, .. })) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

// ---- rollout ----

/// Steps a fresh episode through `actions` and returns its score.
fn walk(spec: &TaskSpec, actions: &[&str]) -> f64 {
    let (mut env, _) = TextGrid::open(spec).unwrap();
    for a in actions {
        if env.terminated() {
            break;
        }
        env.step(&act(a)).unwrap();
    }
    while !env.terminated() {
        env.step(&act("look")).unwrap();
    }
    env.score().unwrap()
}

#[test]
fn expert_candidate_with_scripted_continuation() {
    let (spec, e) = five_step();
    let p = ScriptedPolicy::from_trajectories([&e]);
    for t in 0..e.len() {
        let r = execute(&p, &TextGrid, &spec, &e, t, &e.steps()[t].sample(), 1.0, 0).unwrap();
        assert_eq!(r.final_reward, e.reward());
        assert_eq!(r.continuation, e.steps()[t..].to_vec());
        assert!(!r.is_expert_tail);
    }
}

#[test]
fn invalid_candidate_runs_out_of_steps() {
    let (mut spec, e) = five_step();
    spec.max_steps = 8;
    let p = TemplateStubPolicy::new("", "dance wildly").unwrap();
    let r = execute(&p, &TextGrid, &spec, &e, 1, &only("dance wildly"), 1.0, 0).unwrap();
    assert_eq!(r.final_reward, 0.0);
    assert!(r.truncated);
    assert_eq!(r.continuation.len(), 7);
}

#[test]
fn alternative_completes_the_task_by_hand_walk() {
    let s = switch_scenario();
    let p = ScriptedPolicy::new().with_script(
        s.spec.id(),
        vec![only("take apple from shelf"), only("go to kitchen"), only("put apple in/on table")],
    );
    let r = execute(&p, &TextGrid, &s.spec, &s.expert, s.branch, &StepSample::action_only(s.alternative.clone()), 1.0, 0)
        .unwrap();
    let hand = walk(&s.spec, &["take apple from shelf", "go to kitchen", "put apple in/on table"]);
    assert_eq!(hand, 1.0);
    assert_eq!(r.final_reward, hand);
    assert_eq!(r.continuation.len(), 2);
}

#[test]
fn expert_tail_boundaries() {
    let (_, e) = five_step();
    let last = expert_tail(&e, e.len() - 1).unwrap();
    assert_eq!(last.continuation.len(), 1);
    assert_eq!(last.final_reward, e.reward());
    assert!(last.is_expert_tail);
    let full = expert_tail(&e, 0).unwrap();
    assert_eq!(full.continuation.len(), 5);
    assert!(matches!(expert_tail(&e, e.len()), Err(RolloutError::OutOfRange { t: 5, len: 5 })));
}

#[test]
fn rollout_deduplicates_actions() {
    let (spec, e) = five_step();
    let expert = e.steps()[0].sample();
    let p = TemplateStubPolicy::new("", "look").unwrap();
    let c = CandidateSet::new(0, StepSample::action_only(expert.action.clone()), vec![only("look"), only("look"), only("inventory")]);
    let records = rollout_unique(&p, &TextGrid, &spec, &e, &c, 1.0, 0, false, Execution::Sequential).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[&expert.action].is_expert_tail);
    assert!(!records[&act("look")].is_expert_tail);

    let six = CandidateSet::new(
        0,
        StepSample::action_only(expert.action.clone()),
        ["look", "inventory", "go to kitchen", "go to bedroom", "examine shelf", "go to garage"]
            .into_iter()
            .filter(|a| act(a) != expert.action)
            .take(5)
            .map(only)
            .collect(),
    );
    let records = rollout_unique(&p, &TextGrid, &spec, &e, &six, 1.0, 0, false, Execution::Sequential).unwrap();
    assert_eq!(records.len(), 6);

    let flat = CandidateSet::new(0, StepSample::action_only(expert.action.clone()), vec![StepSample::action_only(expert.action)]);
    assert!(matches!(
        rollout_unique(&p, &TextGrid, &spec, &e, &flat, 1.0, 0, false, Execution::Sequential),
        Err(RolloutError::NotFlagged(0))
    ));
}

#[test]
fn two_unique_rewards_match_hand_walks() {
    let s = switch_scenario();
    let e = &s.expert;
    let c = CandidateSet::new(
        s.branch,
        StepSample::action_only(e.steps()[s.branch].action.clone()),
        vec![StepSample::action_only(s.alternative.clone())],
    );
    let records = rollout_unique(&s.policy, &TextGrid, &s.spec, e, &c, 1.0, 5, true, Execution::Sequential).unwrap();
    for (a, r) in &records {
        let mut path: Vec<String> = e.steps()[..s.branch].iter().map(|s| s.action.raw().to_string()).collect();
        path.extend(r.continuation.iter().map(|s| s.action.raw().to_string()));
        let names: Vec<&str> = path.iter().map(String::as_str).collect();
        assert_eq!(r.final_reward, walk(&s.spec, &names), "{a}");
    }
    assert_eq!(records[&s.alternative].final_reward, 1.0);
    assert_eq!(records[&act("go to bedroom")].final_reward, 0.5);
}

// ---- critique ----

struct Canned {
    reply: String,
    calls: AtomicUsize,
}

impl Canned {
    fn new(reply: &str) -> Self {
        Self {
            reply: reply.into(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl BaseModel for Canned {
    fn complete_text(&self, _prompt: &str, _temperature: f64) -> Result<String, PolicyError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.reply.clone())
    }
}

/// Stub base that fails for prompts about one action.
struct FailsOn(&'static str);

impl BaseModel for FailsOn {
    fn complete_text(&self, prompt: &str, temperature: f64) -> Result<String, PolicyError> {
        if prompt.contains(&format!("the action **{}**", self.0)) {
            return Err(PolicyError::PolicyUnavailable("boom".into()));
        }
        TemplateStubBase.complete_text(prompt, temperature)
    }
}

fn branch_records() -> (sand_core::fixtures::SwitchScenario, History, IndexMap<Action, RolloutRecord>) {
    let mut s = switch_scenario();
    s.policy = s.policy.with_task_state(
        "switch-apple",
        &["take apple from shelf", "look"],
        Distribution::over_actions(&[("go to kitchen", 1.0)]).unwrap(),
    );
    let h = history(&s.spec, &s.expert, s.branch);
    let c = CandidateSet::new(
        s.branch,
        StepSample::action_only(s.expert.steps()[s.branch].action.clone()),
        vec![StepSample::action_only(s.alternative.clone()), only("look")],
    );
    let records = rollout_unique(&s.policy, &TextGrid, &s.spec, &s.expert, &c, 1.0, 5, false, Execution::Sequential).unwrap();
    (s, h, records)
}

#[test]
fn critique_prompt_shape() {
    let (s, h, records) = branch_records();
    let r = &records[&s.alternative];
    let p = build_critique_prompt(s.expert.instruction(), &h, r);
    for header in ["### Background", "### Private Mental Simulations", "### Output Format"] {
        assert!(p.contains(header));
    }
    assert!(p.matches("**go to kitchen**").count() >= 2);

    let (_, obs) = TextGrid.reset(&s.spec).unwrap();
    let h0 = History::expert_prefix(&s.expert, Some(obs.clone()), 0);
    let p0 = build_critique_prompt(s.expert.instruction(), &h0, &expert_tail(&s.expert, 0).unwrap());
    let state = p0.split("### Current State\n").nth(1).unwrap().split("\n\n###").next().unwrap();
    assert_eq!(state, obs.0);
}

#[test]
fn critique_generation_paths() {
    let (s, h, records) = branch_records();
    let r = &records[&s.alternative];
    let p = build_critique_prompt(s.expert.instruction(), &h, r);
    let a = generate_critique(&TemplateStubBase, &p, &s.alternative, r.final_reward).unwrap();
    let b = generate_critique(&TemplateStubBase, &p, &s.alternative, r.final_reward).unwrap();
    assert_eq!(a, b);
    assert!(a.text.contains("1.0"));

    let junk = Canned::new("I refuse to follow the format");
    assert!(matches!(
        generate_critique(&junk, &p, &s.alternative, 1.0),
        Err(CritiqueError::Parse { .. })
    ));
    assert_eq!(junk.calls.load(Ordering::SeqCst), 2);

    let mid = Canned::new("Sure. Action Evaluation:   Going there is wise.  ");
    assert_eq!(generate_critique(&mid, &p, &s.alternative, 1.0).unwrap().text, "Going there is wise.");
}

#[test]
fn critique_all_covers_each_record() {
    let (s, h, records) = branch_records();
    let all = critique_all(&TemplateStubBase, s.expert.instruction(), &h, &records, Execution::default()).unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all.keys().collect::<Vec<_>>(), records.keys().collect::<Vec<_>>());
    for (a, c) in &all {
        let reward = sand_core::prompt::format_reward(records[a].final_reward);
        assert!(c.text.contains(&reward), "{a}: {}", c.text);
    }
    let err = critique_all(&FailsOn("look"), s.expert.instruction(), &h, &records, Execution::Sequential).unwrap_err();
    assert!(matches!(&err, CritiqueError::Policy { action, .. } if action == "look"));
    assert!(err.to_string().contains("look"));
}

// ---- synthesis ----

#[test]
fn deliberation_prompt_and_draft() {
    let (s, h, records) = branch_records();
    let pairs: Vec<_> = critique_all(&TemplateStubBase, s.expert.instruction(), &h, &records, Execution::Sequential)
        .unwrap()
        .into_iter()
        .collect();
    let prompt = build_deliberation_prompt(s.expert.instruction(), &h, &pairs, &s.alternative).unwrap();
    assert!(prompt.contains("### Private Scratch-pad") && prompt.contains("### Very Important"));
    let scratch = prompt.split("(these notes stay private):\n").nth(1).unwrap().split("\n\n").next().unwrap();
    assert_eq!(scratch.lines().count(), 3);

    let draft = synthesize(&TemplateStubBase, &prompt, &pairs, &s.alternative).unwrap();
    let order: Vec<&Action> = draft.bullets.iter().map(|(a, _)| a).collect();
    assert_eq!(order, pairs.iter().map(|(a, _)| a).collect::<Vec<_>>());
    assert!(!draft.rationale.is_empty());

    assert!(matches!(
        build_deliberation_prompt(s.expert.instruction(), &h, &pairs, &act("open closet")),
        Err(SynthesisError::Contract(_))
    ));
}

#[test]
fn synthesis_retries_then_fails() {
    let (s, h, records) = branch_records();
    let pairs: Vec<_> = critique_all(&TemplateStubBase, s.expert.instruction(), &h, &records, Execution::Sequential)
        .unwrap()
        .into_iter()
        .collect();
    let prompt = build_deliberation_prompt(s.expert.instruction(), &h, &pairs, &s.alternative).unwrap();
    let missing = Canned::new("Thought: hmm.\n\n- go to kitchen: good\n- look: idle\n\nSo kitchen.");
    assert!(matches!(synthesize(&missing, &prompt, &pairs, &s.alternative), Err(SynthesisError::Parse(_))));
    assert_eq!(missing.calls.load(Ordering::SeqCst), 2);

    let leaky = Canned::new(
        "Thought: per my scratch-pad.\n\n- go to kitchen: good\n- look: idle\n- go to bedroom: slow\n\nSo kitchen.",
    );
    assert!(matches!(synthesize(&leaky, &prompt, &pairs, &s.alternative), Err(SynthesisError::Parse(_))));
}

fn record(a: &str, reward: f64) -> (Action, RolloutRecord) {
    (
        act(a),
        RolloutRecord {
            candidate: only(a),
            continuation: vec![],
            final_reward: reward,
            truncated: false,
            is_expert_tail: false,
        },
    )
}

#[test]
fn switch_rule_examples() {
    let (_, expert) = record("go to bedroom", 0.5);
    let others: IndexMap<_, _> = [record("go to bedroom", 0.5), record("look", 0.2), record("go to kitchen", 1.0)].into();
    let on = decide_switch(true, &expert, &others);
    assert!(on.switched);
    assert_eq!(on.chosen, act("go to kitchen"));
    assert_eq!(on.best_reward, 1.0);
    assert!(!decide_switch(false, &expert, &others).switched);

    let (_, top) = record("go to bedroom", 1.0);
    assert!(!decide_switch(true, &top, &others).switched);

    let ties: IndexMap<_, _> = [record("open fridge", 1.0), record("go to kitchen", 1.0), record("go to bedroom", 0.5)].into();
    assert_eq!(decide_switch(true, &expert, &ties).chosen, act("go to kitchen"));
}

fn draft_for(actions: &[&Action]) -> DeliberationDraft {
    DeliberationDraft {
        reflection: "I am here.".into(),
        bullets: actions.iter().map(|a| ((*a).clone(), "fine".to_string())).collect(),
        rationale: "So go.".into(),
    }
}

#[test]
fn assemble_cases() {
    let (_, e) = five_step();
    let plain: Vec<StepPlan> = (0..5).map(|_| StepPlan::Plain { candidate_count: 1 }).collect();
    let d = assemble(&e, &plain, 1).unwrap();
    assert_eq!(d.to_trajectory().steps(), e.steps());
    assert!(d.steps().iter().all(|s| s.thought.kind == ThoughtKind::Plain));

    let expert = e.steps()[2].action.clone();
    let mut one = plain.clone();
    one[2] = StepPlan::Deliberate {
        candidate_count: 2,
        draft: draft_for(&[&expert, &act("look")]),
        decision: SwitchDecision {
            original: expert.clone(),
            chosen: expert.clone(),
            switched: false,
            original_reward: 1.0,
            best_reward: 1.0,
        },
        switch_rollout: None,
    };
    let d = assemble(&e, &one, 1).unwrap();
    assert_eq!(d.deliberated_steps(), 1);
    let t = d.to_trajectory();
    assert_eq!(t.actions().collect::<Vec<_>>(), e.actions().collect::<Vec<_>>());
    for (a, b) in t.steps().iter().zip(e.steps()) {
        assert_eq!(a.observation, b.observation);
    }
    assert_eq!(t.steps()[2].thought.kind, ThoughtKind::Deliberative);
    assert!(assemble(&e, &one[..4], 1).is_err());
}

#[test]
fn assemble_switch_uses_the_rollout() {
    let s = switch_scenario();
    let e = &s.expert;
    let c = CandidateSet::new(
        s.branch,
        StepSample::action_only(e.steps()[s.branch].action.clone()),
        vec![StepSample::action_only(s.alternative.clone())],
    );
    let records = rollout_unique(&s.policy, &TextGrid, &s.spec, e, &c, 1.0, 5, false, Execution::Sequential).unwrap();
    let decision = decide_switch(true, &records[&c.expert.action], &records);
    assert!(decision.switched);
    let r = records[&decision.chosen].clone();
    let plans = vec![
        StepPlan::Plain { candidate_count: 1 },
        StepPlan::Deliberate {
            candidate_count: 2,
            draft: draft_for(&records.keys().collect::<Vec<_>>()),
            decision,
            switch_rollout: Some(r.clone()),
        },
    ];
    let d = assemble(e, &plans, 1).unwrap();
    let t = d.to_trajectory();
    assert_eq!(t.steps()[0], e.steps()[0]);
    assert_eq!(t.steps()[1].action, r.continuation[0].action);
    assert_eq!(t.steps()[1].observation, r.continuation[0].observation);
    assert_eq!(t.steps()[2..], r.continuation[1..]);
    assert_eq!(d.reward(), 1.0);
    let replay = run_script(&s.spec, &t.steps().iter().map(|s| s.sample()).collect::<Vec<_>>()).unwrap();
    assert_eq!(replay.reward(), 1.0);
}

// ---- pipeline ----

#[test]
fn flagged_steps_equal_standalone_scan() {
    let (specs, experts) = expert_corpus(12, 8, RewardMode::Binary).unwrap();
    let policy = expert_policy(&experts, 0.6);
    let b = Backends {
        policy: &policy,
        base: &TemplateStubBase,
        env: &TextGrid,
    };
    let cfg = SynthesisConfig {
        expert_switch: false,
        seed: 2,
        ..SynthesisConfig::default()
    };
    let run = synthesize_dataset(b, &specs, &experts, &cfg, Execution::default());
    let mut brute = 0;
    for (spec, e) in specs.iter().zip(&experts) {
        let seed = trajectory_seed(&cfg, e.id());
        let sets = scan_trajectory(&policy, &TextGrid, spec, e, cfg.n, cfg.sample_temperature, seed).unwrap();
        brute += sets
            .iter()
            .filter(|c| {
                let unique: std::collections::BTreeSet<&str> = c
                    .sampled
                    .iter()
                    .chain([&c.expert])
                    .map(|s| s.action.canonical())
                    .collect();
                unique.len() > 1
            })
            .count();
    }
    assert_eq!(run.summary.flagged_steps, brute);
    assert!(brute > 0);
}

#[test]
fn sequential_and_parallel_agree() {
    let (specs, experts) = expert_corpus(8, 3, RewardMode::Granular).unwrap();
    let policy = expert_policy(&experts, 0.5);
    let b = Backends {
        policy: &policy,
        base: &TemplateStubBase,
        env: &TextGrid,
    };
    let cfg = SynthesisConfig::default();
    let seq = synthesize_dataset(b, &specs, &experts, &cfg, Execution::Sequential);
    let par = synthesize_dataset(b, &specs, &experts, &cfg, Execution::with_jobs(4));
    assert_eq!(seq.trajectories(), par.trajectories());
    assert_eq!(seq.summary, par.summary);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ground_truth_kept_without_switching(seed in any::<u64>(), follow in 0.3f64..0.9) {
        let (specs, experts) = expert_corpus(4, seed % 50, RewardMode::Granular).unwrap();
        let policy = expert_policy(&experts, follow);
        let b = Backends { policy: &policy, base: &TemplateStubBase, env: &TextGrid };
        let cfg = SynthesisConfig { expert_switch: false, seed, ..SynthesisConfig::default() };
        for (spec, e) in specs.iter().zip(&experts) {
            let o = synthesize_trajectory(b, spec, e, &cfg, Execution::Sequential).unwrap();
            let t = o.trajectory.to_trajectory();
            prop_assert_eq!(t.actions().collect::<Vec<_>>(), e.actions().collect::<Vec<_>>());
            prop_assert_eq!(t.reward(), e.reward());
        }
    }

    #[test]
    fn rollout_rewards_are_bounded(seed in any::<u64>(), t in 0usize..5) {
        let (spec, e) = five_step();
        let policy = expert_policy(std::slice::from_ref(&e), 0.4);
        let c = sample_candidates(&policy, &history(&spec, &e, t), &e.steps()[t], 5, 1.0, seed).unwrap();
        if needs_deliberation(&c) {
            let records = rollout_unique(&policy, &TextGrid, &spec, &e, &c, 1.0, seed, false, Execution::Sequential).unwrap();
            for r in records.values() {
                prop_assert!((0.0..=1.0).contains(&r.final_reward));
                if r.is_expert_tail {
                    prop_assert_eq!(r.final_reward, e.reward());
                }
            }
        }
    }

    #[test]
    fn critique_parser_is_total(s in ".{0,80}") {
        match parse_critique(&s) {
            Ok(text) => {
                prop_assert!(!text.is_empty());
                prop_assert_eq!(text.trim(), text.as_str());
            }
            Err(reason) => prop_assert!(!reason.is_empty()),
        }
    }

    #[test]
    fn draft_render_round_trips(
        reflection in "[A-Za-z][A-Za-z ,]{0,30}[a-z.]",
        judgements in prop::collection::vec("[A-Za-z][A-Za-z ,]{0,20}[a-z.]", 2..5),
        rationale in "[A-Za-z][A-Za-z ,]{0,30}[a-z.]",
    ) {
        let pool = ["go to kitchen", "open fridge", "take egg from fridge", "look", "examine desk"];
        let candidates: Vec<Action> = pool[..judgements.len()].iter().map(|a| act(a)).collect();
        let draft = DeliberationDraft {
            reflection: reflection.trim().to_string(),
            bullets: candidates.iter().cloned().zip(judgements.iter().map(|j| j.trim().to_string())).collect(),
            rationale: rationale.trim().to_string(),
        };
        let back = DeliberationDraft::parse_rendered(&draft.render(), &candidates).unwrap();
        prop_assert_eq!(back, draft);
    }
}
