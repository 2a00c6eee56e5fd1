//! Scripted tasks: a policy that replays a fixed action list, an environment
//! that answers from the matching observation list, and a seeded generator
//! for synthetic software-engineering workloads.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Summarizer;
use crate::runtime::{run_episode, EnvReply, Environment, Policy, StrategyConfig, StrategyKind, TaskHeader};
use crate::tokens::{TokenBudget, TokenCount, BYTES_PER_TOKEN};
use crate::trajectory::{TerminalStatus, ToolAction, ToolName, Trajectory};
use crate::workspace::ContextState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default)]
    pub thought: String,
    pub tool: ToolName,
    pub action: String,
    pub observation: String,
    /// Filler appended to the observation, in estimated tokens.
    #[serde(default)]
    pub pad_tokens: u32,
}

impl ScriptStep {
    pub fn action(&self) -> ToolAction {
        ToolAction::new(self.tool.clone(), self.action.as_str())
    }

    pub fn observation_text(&self, salt: u32) -> String {
        if self.pad_tokens == 0 {
            return self.observation.clone();
        }
        let mut out = self.observation.clone();
        out.push('\n');
        filler(&mut out, salt, self.pad_tokens as usize * BYTES_PER_TOKEN);
        out
    }
}

const FILLER_LINES: &[&str] = &[
    "    return self._cache.get(key, default)",
    "def _normalize(value, *, strict=False):",
    "    if not isinstance(other, type(self)):",
    "        return NotImplemented",
    "class Resolver(BaseResolver):",
    "    for item in sorted(items, key=attrgetter(\"name\")):",
    "import os, sys, re",
    "    self.assertEqual(result, expected)",
    "        yield from self._walk(child, depth + 1)",
    "    logger.debug(\"resolved %s -> %s\", src, dst)",
];

/// Deterministic source-listing text of `bytes` bytes.
fn filler(out: &mut String, salt: u32, bytes: usize) {
    let start = out.len();
    let mut line = salt as usize;
    while out.len() - start < bytes {
        let _ = writeln!(
            out,
            "{:>4}  {}",
            line % 997,
            FILLER_LINES[(line * 7 + salt as usize) % FILLER_LINES.len()]
        );
        line += 1;
    }
    out.truncate(start + bytes);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScript {
    pub task_id: String,
    pub system_prompt: String,
    pub task_prompt: String,
    /// Terminal status reported on `submit`.
    #[serde(default = "yes")]
    pub success: bool,
    pub steps: Vec<ScriptStep>,
}

fn yes() -> bool {
    true
}

impl TaskScript {
    pub fn header(&self) -> TaskHeader {
        TaskHeader {
            task_id: self.task_id.clone(),
            system_prompt: self.system_prompt.clone(),
            task_prompt: self.task_prompt.clone(),
        }
    }

    pub fn policy(&self, mode: FoldMode) -> ScriptedPolicy {
        ScriptedPolicy::new(self, mode)
    }

    pub fn env(&self) -> ScriptedEnv {
        ScriptedEnv::new(self)
    }

    /// Tokens of the full append-only rendering of this task.
    pub fn append_only_tokens(&self) -> TokenCount {
        let mut state = ContextState::new(self.system_prompt.as_str(), self.task_prompt.as_str(), 5)
            .expect("positive retain_k");
        let mut env = self.env();
        for (i, s) in self.steps.iter().enumerate() {
            let action = s.action();
            let obs = env.step(&action).observation;
            state
                .append_step(crate::trajectory::Step::new(i as u32 + 1, s.thought.clone(), action, obs))
                .expect("contiguous");
        }
        state.rendered_tokens()
    }
}

/// When a scripted policy emits `context`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FoldMode {
    Never,
    /// Fold whenever the context reaches the soft threshold, and at phase
    /// boundaries once the context is at least `boundary_fraction` of it.
    Cooperative {
        soft_threshold: TokenCount,
        run_min: usize,
        min_spacing: u32,
        boundary_fraction: f64,
    },
    /// Fold every `n` rounds.
    EveryN { n: u32 },
}

impl FoldMode {
    pub fn cooperative(budget: &TokenBudget) -> Self {
        FoldMode::Cooperative {
            soft_threshold: budget.soft_threshold(),
            run_min: 4,
            min_spacing: 10,
            boundary_fraction: 0.5,
        }
    }

    /// Cooperative folding under `cat_folding`, no folding otherwise.
    pub fn for_strategy(strategy: &StrategyConfig) -> Self {
        match strategy.kind {
            StrategyKind::CatFolding => Self::cooperative(&strategy.budget),
            _ => FoldMode::Never,
        }
    }
}

pub struct ScriptedPolicy {
    actions: Vec<(String, ToolAction)>,
    cursor: usize,
    mode: FoldMode,
}

impl ScriptedPolicy {
    pub fn new(task: &TaskScript, mode: FoldMode) -> Self {
        Self {
            actions: task.steps.iter().map(|s| (s.thought.clone(), s.action())).collect(),
            cursor: 0,
            mode,
        }
    }

    fn wants_fold(&self, ctx: &ContextState) -> bool {
        let working = ctx.working().steps();
        if working.len() <= ctx.retain_k() {
            return false;
        }
        let since_fold = ctx.round() - ctx.memory().last_fold_round().unwrap_or(0);
        match self.mode {
            FoldMode::Never => false,
            FoldMode::EveryN { n } => since_fold >= n,
            FoldMode::Cooperative {
                soft_threshold,
                run_min,
                min_spacing,
                boundary_fraction,
            } => {
                let tokens = ctx.rendered_tokens();
                if tokens >= soft_threshold {
                    return true;
                }
                let Some((_, next)) = self.actions.get(self.cursor) else {
                    return false;
                };
                let tail = &working[working.len().saturating_sub(run_min)..];
                let boundary = tail.len() == run_min
                    && tail.iter().all(|s| s.action.tool_name == tail[0].action.tool_name)
                    && next.tool_name != tail[0].action.tool_name;
                boundary && since_fold >= min_spacing && tokens >= soft_threshold.scale(boundary_fraction)
            }
        }
    }
}

impl Policy for ScriptedPolicy {
    fn next(&mut self, ctx: &ContextState) -> (String, ToolAction) {
        if self.wants_fold(ctx) {
            return (
                "The history is getting long; condensing older rounds into memory.".into(),
                ToolAction::context("condense older rounds"),
            );
        }
        match self.actions.get(self.cursor) {
            Some(next) => {
                self.cursor += 1;
                next.clone()
            }
            None => ("Nothing left to try.".into(), ToolAction::new(ToolName::Submit, "submit")),
        }
    }
}

pub struct ScriptedEnv {
    observations: Vec<String>,
    cursor: usize,
    success: bool,
}

impl ScriptedEnv {
    pub fn new(task: &TaskScript) -> Self {
        Self {
            observations: task
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| s.observation_text(i as u32))
                .collect(),
            cursor: 0,
            success: task.success,
        }
    }
}

impl Environment for ScriptedEnv {
    fn step(&mut self, action: &ToolAction) -> EnvReply {
        let observation = self
            .observations
            .get(self.cursor)
            .cloned()
            .unwrap_or_else(|| "error: no scripted observation".into());
        self.cursor += 1;
        let terminal = action.is_submit().then_some(if self.success {
            TerminalStatus::SubmittedSuccess
        } else {
            TerminalStatus::SubmittedFailure
        });
        EnvReply { observation, terminal }
    }
}

/// Runs one scripted task under `strategy`.
pub fn run_scripted(
    task: &TaskScript,
    strategy: &StrategyConfig,
    mode: FoldMode,
    summarizer: &Summarizer,
) -> Result<crate::runtime::Episode> {
    let mut policy = task.policy(mode);
    let mut env = task.env();
    run_episode(&task.header(), &mut policy, &mut env, strategy, summarizer)
}

/// Base trajectories: append-only runs with the fold tool disabled and an
/// effectively unlimited budget.
pub fn base_trajectory(task: &TaskScript, summarizer: &Summarizer) -> Result<Trajectory> {
    let strategy = StrategyConfig::new(StrategyKind::AppendOnly)
        .with_budget(TokenBudget::new(1 << 40, 0.75)?)
        .with_max_rounds(task.steps.len().max(1));
    Ok(run_scripted(task, &strategy, FoldMode::Never, summarizer)?.trajectory)
}

/// Workload file: explicit tasks, generated tasks, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: Option<WorkloadSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskScript>,
}

impl Workload {
    /// Explicit tasks followed by generated ones. `seed` overrides the
    /// file's seed.
    pub fn tasks(&self, seed: Option<u64>) -> Vec<TaskScript> {
        let mut tasks = self.tasks.clone();
        if let Some(spec) = &self.generator {
            tasks.extend(spec.generate(seed.unwrap_or(self.seed)));
        }
        tasks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_tasks: usize,
    /// Environment steps per task, including the final submit.
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_pad_tokens: u32,
    pub max_pad_tokens: u32,
    /// Same-tool run length of one work phase.
    pub min_phase: usize,
    pub max_phase: usize,
    /// Share of failing test phases.
    #[serde(default = "default_fail_rate")]
    pub failure_rate: f64,
    /// Share of tasks whose submission fails.
    #[serde(default)]
    pub submit_failure_rate: f64,
}

fn default_fail_rate() -> f64 {
    0.3
}

impl WorkloadSpec {
    /// Long-horizon tasks that exhaust a 64k budget when run append-only.
    pub fn long_horizon() -> Self {
        Self {
            n_tasks: 100,
            min_steps: 120,
            max_steps: 440,
            min_pad_tokens: 300,
            max_pad_tokens: 1100,
            min_phase: 4,
            max_phase: 12,
            failure_rate: 0.3,
            submit_failure_rate: 0.0,
        }
    }

    /// Source tasks for base trajectories to retrofit.
    pub fn retrofit_corpus() -> Self {
        Self {
            n_tasks: 100,
            min_steps: 80,
            max_steps: 100,
            min_pad_tokens: 250,
            max_pad_tokens: 1000,
            min_phase: 3,
            max_phase: 9,
            failure_rate: 0.3,
            submit_failure_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_tasks > 0
            && self.min_steps >= 2
            && self.min_steps <= self.max_steps
            && self.min_pad_tokens <= self.max_pad_tokens
            && self.min_phase >= 1
            && self.min_phase <= self.max_phase
            && (0.0..=1.0).contains(&self.failure_rate)
            && (0.0..=1.0).contains(&self.submit_failure_rate);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid workload generator {self:?}")))
        }
    }

    pub fn generate(&self, seed: u64) -> Vec<TaskScript> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.n_tasks).map(|i| self.task(&mut rng, seed, i)).collect()
    }

    fn task(&self, rng: &mut ChaCha8Rng, seed: u64, i: usize) -> TaskScript {
        let repo = REPOS[rng.random_range(0..REPOS.len())];
        let module = MODULES[rng.random_range(0..MODULES.len())];
        let issue = rng.random_range(1000..40000);
        let total = rng.random_range(self.min_steps..=self.max_steps);
        let mut gen = PhaseWriter {
            rng,
            spec: self,
            steps: Vec::with_capacity(total),
            module,
        };
        let mut phase = 0usize;
        while gen.steps.len() < total - 1 {
            let room = total - 1 - gen.steps.len();
            let len = gen.rng.random_range(self.min_phase..=self.max_phase).min(room);
            match phase % 4 {
                0 => gen.explore(len),
                1 => gen.reproduce(len),
                2 => gen.edit(len),
                _ => gen.test(len),
            }
            phase += 1;
        }
        gen.steps.push(ScriptStep {
            thought: "The fix is in place and the tests pass; submitting.".into(),
            tool: ToolName::Submit,
            action: "submit".into(),
            observation: "Submission recorded.".into(),
            pad_tokens: 0,
        });
        let success = !gen.rng.random_bool(self.submit_failure_rate);
        TaskScript {
            task_id: format!("synth-{seed}-{i:03}"),
            system_prompt: SYSTEM_PROMPT.into(),
            task_prompt: format!(
                "Resolve issue #{issue} in {repo}: calling `{module}.resolve()` with nested \
                 overrides returns stale values.\nThe fix must keep the public API unchanged. \
                 Do not modify the existing tests."
            ),
            success,
            steps: gen.steps,
        }
    }
}

const SYSTEM_PROMPT: &str = "You are a software engineering agent working in a repository sandbox. \
Tools: execute_bash(command) runs a shell command; str_replace_editor(command, path, ...) views and \
edits files; context(note) condenses older history into long-term memory; submit() ends the task. \
Think step by step, then call exactly one tool per turn.";

const REPOS: &[&str] = &["astropy/astropy", "django/django", "sympy/sympy", "pallets/flask", "psf/requests"];
const MODULES: &[&str] = &["config", "resolver", "registry", "loader", "settings"];

struct PhaseWriter<'a> {
    rng: &'a mut ChaCha8Rng,
    spec: &'a WorkloadSpec,
    steps: Vec<ScriptStep>,
    module: &'a str,
}

impl PhaseWriter<'_> {
    fn pad(&mut self) -> u32 {
        self.rng.random_range(self.spec.min_pad_tokens..=self.spec.max_pad_tokens)
    }

    fn push(&mut self, thought: String, tool: ToolName, action: String, observation: String) {
        let pad_tokens = self.pad();
        self.steps.push(ScriptStep {
            thought,
            tool,
            action,
            observation,
            pad_tokens,
        });
    }

    fn explore(&mut self, len: usize) {
        for j in 0..len {
            let line = self.rng.random_range(10..900);
            let (action, obs) = match j % 3 {
                0 => (
                    format!("grep -rn \"def resolve\" src/{}/", self.module),
                    format!("src/{}/core.py:{line}:    def resolve(self, key, overrides=None):", self.module),
                ),
                1 => (
                    format!("sed -n '{line},{}p' src/{}/core.py", line + 80, self.module),
                    format!("Showing lines {line}-{} of src/{}/core.py", line + 80, self.module),
                ),
                _ => (
                    format!("find src/{} -name '*.py' | head -50", self.module),
                    format!("src/{0}/__init__.py\nsrc/{0}/core.py\nsrc/{0}/cache.py", self.module),
                ),
            };
            self.push(format!("Looking at how resolve handles overrides (line {line})."), ToolName::ExecuteBash, action, obs);
        }
    }

    fn reproduce(&mut self, len: usize) {
        for j in 0..len {
            let last = j + 1 == len;
            let obs = if last {
                "Bug reproduced: resolve() returned 'old' instead of 'new'.".to_string()
            } else {
                format!("Traceback (most recent call last):\n  File \"reproduce.py\", line {}, in <module>\nKeyError: 'override'", j + 3)
            };
            self.push(
                "Running the reproduction script.".into(),
                ToolName::ExecuteBash,
                "python reproduce.py".into(),
                obs,
            );
        }
    }

    fn edit(&mut self, len: usize) {
        for j in 0..len {
            let line = self.rng.random_range(10..900);
            let (action, obs) = if j % 2 == 0 {
                (
                    format!("view src/{}/core.py --view_range {line} {}", self.module, line + 40),
                    format!("Here's the result of running `cat -n` on src/{}/core.py:", self.module),
                )
            } else {
                (
                    format!("str_replace src/{}/core.py --old 'self._cache[key]' --new 'self._lookup(key, overrides)'", self.module),
                    format!("The file src/{}/core.py has been edited.", self.module),
                )
            };
            self.push(format!("Editing the lookup path near line {line}."), ToolName::StrReplaceEditor, action, obs);
        }
    }

    fn test(&mut self, len: usize) {
        let failing = self.rng.random_bool(self.spec.failure_rate);
        for j in 0..len {
            let last = j + 1 == len;
            let obs = if failing && !last {
                format!(
                    "FAILED tests/test_{0}.py::test_nested_override - AssertionError: 'old' != 'new'\n{1} failed, {2} passed",
                    self.module,
                    len - j,
                    40 + j
                )
            } else if last {
                format!("{} passed in 3.21s", 48 + j)
            } else {
                format!("tests/test_{}.py ........ [{}%]", self.module, (j + 1) * 100 / len)
            };
            self.push(
                "Running the test suite.".into(),
                ToolName::ExecuteBash,
                format!("python -m pytest tests/test_{}.py -q", self.module),
                obs,
            );
        }
    }
}
