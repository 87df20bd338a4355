//! The `sand` command line: synthesize, evaluate, iterate, validate, export
//! and fixture generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Shell;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    export_sft_chat, load_records, load_trajectories, write_deliberation, DatasetManifest,
    IterationState, Source,
};
use crate::env::remote::RemoteEnvBackend;
use crate::env::textgrid::TextGrid;
use crate::env::{load_tasks, replay_full, write_tasks, EnvBackend, RewardMode, TaskSpec};
use crate::exec::Execution;
use crate::fixtures::{expert_corpus, expert_policy};
use crate::metrics::{difficulty_bands, evaluate, EvalReport};
use crate::pipeline::{synthesize_dataset, Backends, SynthesisConfig, SynthesisRun};
use crate::policy::{
    BaseModel, Policy, RemoteChatClient, RemoteChatConfig, TabularPolicy, TemplateStubBase,
    TemplateStubPolicy,
};
use crate::prompt::environment_prompt;
use crate::trajectory::{Split, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_UNAVAILABLE: i32 = 2;
pub const EXIT_REJECTS: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Tabular { path: PathBuf },
    Stub {
        #[serde(default)]
        thought: String,
        action: String,
    },
    Remote(RemoteChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseConfig {
    Stub,
    Remote(RemoteChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Textgrid,
    Remote {
        addr: String,
        #[serde(default = "default_env_timeout")]
        timeout_ms: u64,
    },
}

fn default_env_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub tasks: PathBuf,
    pub expert: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            tasks: "tasks.jsonl".into(),
            expert: "expert.jsonl".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Samples per step.
    pub n: usize,
    pub iterations: u32,
    pub sample_temperature: f64,
    pub eval_temperature: f64,
    /// Unset means on for binary-reward tasks and off for granular ones.
    pub expert_switch: Option<bool>,
    pub reroll_expert: bool,
    pub seed: u64,
    /// Overrides every task's step budget when set.
    pub max_steps: Option<usize>,
    /// Worker threads; 0 means available parallelism, 1 sequential.
    pub jobs: usize,
    /// Rejected fraction above which a pass exits nonzero.
    pub reject_threshold: f64,
    /// System prompt asset for chat export and remote policies.
    pub env_prompt: String,
    /// Shell command run after each iteration's synthesis.
    pub hook: Option<String>,
    pub paths: Paths,
    pub policy: PolicyConfig,
    pub base: BaseConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 5,
            iterations: 3,
            sample_temperature: 1.0,
            eval_temperature: 0.0,
            expert_switch: None,
            reroll_expert: false,
            seed: 0,
            max_steps: None,
            jobs: 0,
            reject_threshold: 0.1,
            env_prompt: "alfworld".into(),
            hook: None,
            paths: Paths::default(),
            policy: PolicyConfig::Tabular {
                path: "policy.json".into(),
            },
            base: BaseConfig::Stub,
            env: EnvConfig::Textgrid,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    /// Resolves relative paths against `dir`.
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.paths.tasks);
        fix(&mut self.paths.expert);
        fix(&mut self.paths.out_dir);
        if let PolicyConfig::Tabular { path } = &mut self.policy {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            bail!("n must be at least 1");
        }
        if self.iterations < 1 {
            bail!("iterations must be at least 1");
        }
        if self.sample_temperature < 0.0 || self.eval_temperature < 0.0 {
            bail!("temperatures must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.reject_threshold) {
            bail!("reject_threshold must lie in [0, 1]");
        }
        environment_prompt(&self.env_prompt)?;
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        Execution::with_jobs(self.jobs)
    }

    /// Switch setting with the per-environment default applied.
    pub fn resolved_switch(&self, specs: &[TaskSpec]) -> bool {
        self.expert_switch
            .unwrap_or_else(|| specs.iter().all(|s| s.reward_mode == RewardMode::Binary))
    }

    pub fn synthesis(&self, specs: &[TaskSpec], iteration: u32) -> SynthesisConfig {
        SynthesisConfig {
            n: self.n,
            sample_temperature: self.sample_temperature,
            expert_switch: self.resolved_switch(specs),
            reroll_expert: self.reroll_expert,
            iteration,
            seed: self.seed,
        }
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskSpec>> {
        let mut specs = load_tasks(&self.paths.tasks)?;
        if let Some(m) = self.max_steps {
            for s in &mut specs {
                s.max_steps = m;
            }
        }
        Ok(specs)
    }

    pub fn build_policy(&self) -> Result<Box<dyn Policy>> {
        Ok(match &self.policy {
            PolicyConfig::Tabular { path } => Box::new(TabularPolicy::load(path)?),
            PolicyConfig::Stub { thought, action } => Box::new(TemplateStubPolicy::new(thought, action)?),
            PolicyConfig::Remote(c) => {
                let mut c = c.clone().with_env_defaults();
                if c.system_prompt.is_none() {
                    let system = environment_prompt(&self.env_prompt)?
                        .render(&[("task", String::new())].into())?;
                    c.system_prompt = Some(system.trim_end().to_string());
                }
                Box::new(RemoteChatClient::new(c))
            }
        })
    }

    pub fn build_base(&self) -> Box<dyn BaseModel> {
        match &self.base {
            BaseConfig::Stub => Box::new(TemplateStubBase),
            BaseConfig::Remote(c) => Box::new(RemoteChatClient::new(c.clone().with_env_defaults())),
        }
    }

    pub fn build_env(&self) -> Box<dyn EnvBackend> {
        match &self.env {
            EnvConfig::Textgrid => Box::new(TextGrid),
            EnvConfig::Remote { addr, timeout_ms } => {
                Box::new(RemoteEnvBackend::new(addr.clone(), Duration::from_millis(*timeout_ms)))
            }
        }
    }

    /// The configuration with defaults resolved, as TOML.
    pub fn echo(&self, specs: &[TaskSpec]) -> String {
        let mut resolved = self.clone();
        resolved.expert_switch = Some(self.resolved_switch(specs));
        toml::to_string(&resolved).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Binary,
    Granular,
}

#[derive(Debug, Parser)]
#[command(name = "sand", version, about = "Deliberation trajectory synthesis for LLM agents")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Candidate samples per step.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub iterations: Option<u32>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub expert_switch: Option<OnOff>,
    /// Backend override such as `policy=stub:look`, `policy=tabular:p.json`,
    /// `base=remote:http://host/v1`, `env=remote:host:port`. Repeatable.
    #[arg(long, global = true)]
    pub backend: Vec<String>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one synthesis pass over the expert dataset.
    Synthesize(SynthArgs),
    /// Evaluate the policy on the task set.
    Evaluate(EvalArgs),
    /// Synthesize, hand off to the training hook, and repeat.
    Iterate(OutArg),
    /// Check a dataset file and replay every trajectory.
    Validate(ValidateArgs),
    /// Write a chat-format SFT dataset.
    Export(ExportArgs),
    /// Generate a TextGrid task corpus with expert demonstrations.
    Fixtures(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub expert: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Iteration tag for the output.
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only tasks of this split.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// A previous report whose rewards define difficulty bands.
    #[arg(long)]
    pub bands_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
    /// Skip the environment replay check.
    #[arg(long)]
    pub no_replay: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Environment prompt asset: alfworld or sciworld.
    #[arg(long)]
    pub asset: Option<String>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Binary)]
    pub mode: ModeArg,
    /// Probability that the generated policy follows the expert.
    #[arg(long, default_value_t = 0.7)]
    pub follow: f64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown split {s:?}; expected train, test_seen or test_unseen")
    })
}

fn apply_backend(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let (slot, value) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("backend override {spec:?} is not slot=kind[:arg]"))?;
    let (kind, arg) = match value.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (value, None),
    };
    let need = |what: &str| arg.map(str::to_string).ok_or_else(|| anyhow!("{slot}={kind} needs :{what}"));
    match (slot, kind) {
        ("policy", "tabular") => cfg.policy = PolicyConfig::Tabular { path: need("path")?.into() },
        ("policy", "stub") => {
            cfg.policy = PolicyConfig::Stub {
                thought: String::new(),
                action: need("action")?,
            }
        }
        ("policy", "remote") => cfg.policy = PolicyConfig::Remote(RemoteChatConfig::new(need("url")?, "policy")),
        ("base", "stub") => cfg.base = BaseConfig::Stub,
        ("base", "remote") => cfg.base = BaseConfig::Remote(RemoteChatConfig::new(need("url")?, "base")),
        ("env", "textgrid") => cfg.env = EnvConfig::Textgrid,
        ("env", "remote") => {
            cfg.env = EnvConfig::Remote {
                addr: need("addr")?,
                timeout_ms: default_env_timeout(),
            }
        }
        _ => bail!("unknown backend override {spec:?}"),
    }
    Ok(())
}

/// File config, then flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(i) = cli.iterations {
        cfg.iterations = i;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.expert_switch {
        cfg.expert_switch = Some(s == OnOff::On);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    for b in &cli.backend {
        apply_backend(&mut cfg, b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Command::Fixtures(a) = &cli.command {
        return cmd_fixtures(a, cli.seed.unwrap_or(0));
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synthesize(a) => {
            let mut cfg = cfg;
            if let Some(p) = &a.expert {
                cfg.paths.expert = p.clone();
            }
            if let Some(p) = &a.out {
                cfg.paths.out_dir = p.clone();
            }
            cmd_synthesize(&cfg, a.iteration).map(|o| o.exit_code)
        }
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Iterate(a) => {
            let mut cfg = cfg;
            if let Some(p) = &a.out {
                cfg.paths.out_dir = p.clone();
            }
            cmd_iterate(&cfg).map(|o| o.exit_code)
        }
        Command::Validate(a) => cmd_validate(&cfg, &a.path, !a.no_replay),
        Command::Export(a) => {
            let asset = a.asset.as_deref().unwrap_or(&cfg.env_prompt);
            let ds = load_trajectories(&a.input)?;
            let n = export_sft_chat(&ds, &a.output, asset)?;
            println!("exported {n} chat records to {}", a.output.display());
            Ok(EXIT_OK)
        }
        Command::Fixtures(_) => unreachable!("handled above"),
    }
}

fn write_echo(cfg: &RunConfig, specs: &[TaskSpec], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("effective_config.toml"), cfg.echo(specs))?;
    Ok(())
}

#[derive(Debug)]
pub struct SynthOutcome {
    pub manifest: Option<DatasetManifest>,
    pub run: SynthesisRun,
    pub exit_code: i32,
}

/// Exit code for a pass: rejects above the threshold are an error, reported
/// as backend unavailability when any reject was one.
pub fn reject_exit_code(run: &SynthesisRun, total: usize, threshold: f64) -> i32 {
    let rejected = run.rejects.len();
    if rejected == 0 || (rejected as f64) <= threshold * total as f64 {
        return EXIT_OK;
    }
    if run.rejects.iter().any(|r| r.error.is_unavailable()) {
        EXIT_UNAVAILABLE
    } else {
        EXIT_REJECTS
    }
}

/// One synthesis pass writing `deliberation.jsonl`, `rejects.jsonl`,
/// `manifest.json` and `summary.json` to the output directory.
pub fn synthesize_into(
    cfg: &RunConfig,
    specs: &[TaskSpec],
    experts: &[Trajectory],
    iteration: u32,
    dir: &Path,
) -> Result<SynthOutcome> {
    fs::create_dir_all(dir)?;
    write_echo(cfg, specs, dir)?;
    let policy = cfg.build_policy()?;
    let base = cfg.build_base();
    let env = cfg.build_env();
    let backends = Backends {
        policy: policy.as_ref(),
        base: base.as_ref(),
        env: env.as_ref(),
    };
    let run = synthesize_dataset(backends, specs, experts, &cfg.synthesis(specs, iteration), cfg.execution());

    let rejects: String = run
        .rejects
        .iter()
        .map(|r| {
            serde_json::json!({
                "id": r.id,
                "error": r.error.to_string(),
                "unavailable": r.error.is_unavailable(),
            })
            .to_string()
                + "\n"
        })
        .collect();
    fs::write(dir.join("rejects.jsonl"), rejects)?;

    let manifest = if run.outcomes.is_empty() {
        None
    } else {
        let m = write_deliberation(&run.trajectories(), &dir.join("deliberation.jsonl"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Some(m)
    };
    let s = run.summary;
    let summary = serde_json::json!({
        "iteration": iteration,
        "trajectories": s.trajectories,
        "flagged_steps": s.flagged_steps,
        "switches": s.switches,
        "completions": s.completions,
        "rejected": s.rejected,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "iteration {iteration}: {} trajectories, {} flagged steps, {} switches, {} completions, {} rejected",
        s.trajectories, s.flagged_steps, s.switches, s.completions, s.rejected
    );
    for r in &run.rejects {
        eprintln!("rejected {}: {}", r.id, r.error);
    }
    let exit_code = reject_exit_code(&run, experts.len(), cfg.reject_threshold);
    if exit_code == EXIT_UNAVAILABLE {
        eprintln!("backend unavailable: too many trajectories failed to reach a model or environment");
    }
    Ok(SynthOutcome {
        manifest,
        run,
        exit_code,
    })
}

pub fn cmd_synthesize(cfg: &RunConfig, iteration: u32) -> Result<SynthOutcome> {
    let specs = cfg.load_tasks()?;
    let experts = load_trajectories(&cfg.paths.expert)?;
    synthesize_into(cfg, &specs, &experts, iteration, &cfg.paths.out_dir)
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvalArgs) -> Result<i32> {
    let mut specs = cfg.load_tasks()?;
    if let Some(split) = args.split {
        specs.retain(|s| s.instruction.split == split);
    }
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    write_echo(cfg, &specs, &dir)?;
    let policy = cfg.build_policy()?;
    let env = cfg.build_env();
    let report = evaluate(
        policy.as_ref(),
        env.as_ref(),
        &specs,
        cfg.eval_temperature,
        cfg.seed,
        cfg.execution(),
    )?;
    fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.render_table();
    fs::write(dir.join("eval_report.txt"), &table)?;
    print!("{table}");
    if let Some(base) = &args.bands_from {
        let base: EvalReport = serde_json::from_str(&fs::read_to_string(base)?)
            .with_context(|| format!("reading {}", base.display()))?;
        let bands = difficulty_bands(&base.rewards())?;
        fs::write(dir.join("bands.csv"), report.band_rows(&bands))?;
    }
    let unavailable = report
        .per_task
        .iter()
        .filter_map(|t| t.error.as_deref())
        .any(|e| e.starts_with("policy unavailable") || e.contains("timed out"));
    Ok(if unavailable { EXIT_UNAVAILABLE } else { EXIT_OK })
}

/// Persisted progress of `iterate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub state: IterationState,
    /// Output of the next iteration, synthesized but not yet handed off.
    pub pending: Option<DatasetManifest>,
    /// Policy emitted by the hook, used from the next iteration on.
    pub policy_override: Option<PathBuf>,
}

#[derive(Debug)]
pub struct IterateOutcome {
    pub state: IterateState,
    pub exit_code: i32,
}

fn save_state(path: &Path, s: &IterateState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(s)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cmd_iterate(cfg: &RunConfig) -> Result<IterateOutcome> {
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let specs = cfg.load_tasks()?;
    write_echo(cfg, &specs, out)?;
    let state_path = out.join("state.json");
    let mut st = if state_path.exists() {
        let s: IterateState = serde_json::from_str(&fs::read_to_string(&state_path)?)
            .with_context(|| format!("reading {}", state_path.display()))?;
        println!("resuming at iteration {} of {}", s.state.k, s.state.total);
        s
    } else {
        let expert = DatasetManifest::for_file(&cfg.paths.expert, Source::Expert, 0)?;
        IterateState {
            state: IterationState::new(cfg.iterations, expert),
            pending: None,
            policy_override: None,
        }
    };
    st.state.total = cfg.iterations.max(st.state.k);

    while !st.state.is_complete() {
        let k = st.state.k + 1;
        let dir = out.join(format!("iteration_{k}"));
        let mut iter_cfg = cfg.clone();
        if let (Some(p), PolicyConfig::Tabular { .. }) = (&st.policy_override, &cfg.policy) {
            iter_cfg.policy = PolicyConfig::Tabular { path: p.clone() };
        }
        let manifest = match &st.pending {
            Some(m) => {
                m.verify()?;
                m.clone()
            }
            None => {
                st.state.current_manifest.verify()?;
                let experts = load_trajectories(&st.state.current_manifest.path)?;
                let o = synthesize_into(&iter_cfg, &specs, &experts, k, &dir)?;
                if o.exit_code != EXIT_OK {
                    save_state(&state_path, &st)?;
                    return Ok(IterateOutcome {
                        state: st,
                        exit_code: o.exit_code,
                    });
                }
                let m = o.manifest.ok_or_else(|| anyhow!("iteration {k} produced no trajectories"))?;
                let ds = load_trajectories(&m.path)?;
                export_sft_chat(&ds, &dir.join("chat.jsonl"), &cfg.env_prompt)?;
                st.pending = Some(m.clone());
                save_state(&state_path, &st)?;
                m
            }
        };
        if let Some(hook) = &cfg.hook {
            let policy_out = dir.join("policy.json");
            let status = Shell::new("sh")
                .arg("-c")
                .arg(hook)
                .env("SAND_CHAT_DATASET", dir.join("chat.jsonl"))
                .env("SAND_DELIB_DATASET", &manifest.path)
                .env("SAND_POLICY_OUT", &policy_out)
                .env("SAND_ITERATION", k.to_string())
                .status()
                .with_context(|| format!("running hook for iteration {k}"))?;
            if !status.success() {
                save_state(&state_path, &st)?;
                eprintln!("hook failed at iteration {k} ({status}); state saved for resume");
                return Ok(IterateOutcome {
                    state: st,
                    exit_code: EXIT_INVALID,
                });
            }
            if policy_out.exists() {
                st.policy_override = Some(policy_out);
            }
        }
        let pending = st.pending.take().expect("set above");
        st.state = st.state.advance(pending)?;
        save_state(&state_path, &st)?;
    }
    let lineage: Vec<_> = st.state.history.iter().map(|m| &m.checksum[..12]).collect();
    println!("completed {} iterations; lineage {}", st.state.k, lineage.join(" -> "));
    Ok(IterateOutcome {
        state: st,
        exit_code: EXIT_OK,
    })
}

/// Validates every record and, with `replay`, re-executes each trajectory.
pub fn cmd_validate(cfg: &RunConfig, path: &Path, replay: bool) -> Result<i32> {
    let records = match load_records(path) {
        Ok(r) => r,
        Err(e) => {
            println!("{}: {e}", path.display());
            return Ok(EXIT_INVALID);
        }
    };
    let specs: BTreeMap<String, TaskSpec> = if replay {
        cfg.load_tasks()?
            .into_iter()
            .map(|s| (s.id().to_string(), s))
            .collect()
    } else {
        BTreeMap::new()
    };
    let env = cfg.build_env();
    let mut bad = 0;
    for (line, rec) in &records {
        let checked = if rec.iteration == 0 {
            rec.to_trajectory()
        } else {
            rec.to_deliberation().map(|d| d.to_trajectory())
        };
        let e = match checked {
            Ok(e) => e,
            Err(msg) => {
                println!("line {line}: {msg}");
                bad += 1;
                continue;
            }
        };
        if !replay {
            continue;
        }
        let Some(spec) = specs.get(e.id()) else {
            println!("line {line}: no task spec for {:?}", e.id());
            bad += 1;
            continue;
        };
        match replay_full(env.as_ref(), spec, &e) {
            Ok(Some(r)) if r == e.reward() => {}
            Ok(Some(r)) => {
                println!("line {line}: replay reward {r} differs from recorded {}", e.reward());
                bad += 1;
            }
            Ok(None) => {
                println!("line {line}: episode did not terminate on replay");
                bad += 1;
            }
            Err(err) => {
                println!("line {line}: {err}");
                bad += 1;
            }
        }
    }
    if bad == 0 {
        println!("OK: {} records", records.len());
        Ok(EXIT_OK)
    } else {
        println!("{bad} of {} records invalid", records.len());
        Ok(EXIT_INVALID)
    }
}

pub fn cmd_fixtures(a: &FixtureArgs, seed: u64) -> Result<i32> {
    let mode = match a.mode {
        ModeArg::Binary => RewardMode::Binary,
        ModeArg::Granular => RewardMode::Granular,
    };
    if !(0.0..=1.0).contains(&a.follow) {
        bail!("--follow must lie in [0, 1]");
    }
    let (specs, experts) = expert_corpus(a.count, seed, mode)?;
    fs::create_dir_all(&a.out)?;
    write_tasks(&a.out.join("tasks.jsonl"), &specs)?;
    crate::dataset::write_trajectories(&experts, &a.out.join("expert.jsonl"))?;
    let policy = expert_policy(&experts, a.follow);
    fs::write(
        a.out.join("policy.json"),
        serde_json::to_string_pretty(&policy.to_file())? + "\n",
    )?;
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    fs::write(a.out.join("config.toml"), toml::to_string(&cfg)?)?;
    println!("wrote {} tasks to {}", specs.len(), a.out.display());
    Ok(EXIT_OK)
}
