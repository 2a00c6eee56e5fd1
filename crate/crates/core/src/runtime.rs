//! ReAct loop under three context strategies, and survival / mean-context
//! analysis over finished runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::memory::Summarizer;
use crate::planner::CompressionInput;
use crate::stitch::{fold_step, replay_contexts};
use crate::tokens::{TokenBudget, TokenCount};
use crate::trajectory::{Provenance, Step, TerminalStatus, ToolAction, Trajectory};
use crate::workspace::{ContextState, DEFAULT_RETAIN_K};

/// Chooses the next action from the current context. The workspace can be
/// rendered with [`ContextState::render`]; most policies only need sizes.
pub trait Policy {
    fn next(&mut self, ctx: &ContextState) -> (String, ToolAction);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvReply {
    pub observation: String,
    pub terminal: Option<TerminalStatus>,
}

pub trait Environment {
    fn step(&mut self, action: &ToolAction) -> EnvReply;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    AppendOnly,
    ThresholdCompression,
    CatFolding,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::AppendOnly,
        StrategyKind::ThresholdCompression,
        StrategyKind::CatFolding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::AppendOnly => "append_only",
            StrategyKind::ThresholdCompression => "threshold_compression",
            StrategyKind::CatFolding => "cat_folding",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub budget: TokenBudget,
    #[serde(default = "default_retain_k")]
    pub retain_k: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Automatic fold trigger, threshold_compression only.
    #[serde(default = "default_threshold")]
    pub threshold_fraction: f64,
    /// Stop with `error_loop` after this many consecutive failing
    /// observations.
    #[serde(default)]
    pub error_loop_limit: Option<usize>,
}

fn default_retain_k() -> usize {
    DEFAULT_RETAIN_K
}
fn default_max_rounds() -> usize {
    500
}
fn default_threshold() -> f64 {
    0.75
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            budget: TokenBudget::default(),
            retain_k: DEFAULT_RETAIN_K,
            max_rounds: default_max_rounds(),
            threshold_fraction: default_threshold(),
            error_loop_limit: None,
        }
    }

    pub fn with_max_rounds(mut self, max_rounds: usize) -> Self {
        self.max_rounds = max_rounds;
        self
    }

    pub fn with_budget(mut self, budget: TokenBudget) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.retain_k == 0 || self.max_rounds == 0 {
            return Err(Error::Config("retain_k and max_rounds must be positive".into()));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "threshold_fraction {} not in (0, 1]",
                self.threshold_fraction
            )));
        }
        if self.error_loop_limit == Some(0) {
            return Err(Error::Config("error_loop_limit must be positive".into()));
        }
        Ok(())
    }

    fn threshold(&self) -> TokenCount {
        self.budget.max_context.scale(self.threshold_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHeader {
    pub task_id: String,
    pub system_prompt: String,
    pub task_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub trajectory: Trajectory,
    /// Rendered context before each round; `contexts[t]` is what the policy
    /// saw when producing step `t + 1`.
    pub contexts: Vec<TokenCount>,
    /// Context after the last step.
    pub final_context: TokenCount,
}

/// Runs one episode to a terminal state, budget exhaustion or `max_rounds`.
pub fn run_episode(
    task: &TaskHeader,
    policy: &mut dyn Policy,
    env: &mut dyn Environment,
    strategy: &StrategyConfig,
    summarizer: &Summarizer,
) -> Result<Episode> {
    strategy.validate()?;
    let mut state = ContextState::new(task.system_prompt.as_str(), task.task_prompt.as_str(), strategy.retain_k)?;
    let mut steps: Vec<Step> = Vec::new();
    let mut contexts = Vec::new();
    let mut failing_run = 0usize;

    let status = loop {
        if steps.len() >= strategy.max_rounds {
            break TerminalStatus::Truncated;
        }
        let round = steps.len() as u32 + 1;
        let before = state.rendered_tokens();

        if strategy.kind == StrategyKind::ThresholdCompression
            && before > strategy.threshold()
            && state.working().len() > strategy.retain_k
        {
            debug!(round, tokens = before.0, "threshold fold");
            let step = online_fold(&state, summarizer, round, None)?;
            state.apply(&step)?;
            contexts.push(before);
            steps.push(step);
            continue;
        }

        let (thought, action) = policy.next(&state);
        if action.is_context() {
            if strategy.kind != StrategyKind::CatFolding {
                return Err(Error::IllegalAction {
                    tool: action.tool_name.to_string(),
                    strategy: strategy.kind.as_str(),
                });
            }
            let step = online_fold(&state, summarizer, round, Some((thought, action)))?;
            state.apply(&step)?;
            contexts.push(before);
            steps.push(step);
            continue;
        }

        let reply = env.step(&action);
        let step = Step::new(round, thought, action, reply.observation);
        if state.tokens_with(&step) > strategy.budget.max_context {
            break TerminalStatus::BudgetExhausted;
        }
        failing_run = if summarizer.failure_patterns().is_match(&step.observation) {
            failing_run + 1
        } else {
            0
        };
        state.append_step(step.clone())?;
        contexts.push(before);
        steps.push(step);
        if let Some(status) = reply.terminal {
            break status;
        }
        if strategy.error_loop_limit.is_some_and(|limit| failing_run >= limit) {
            break TerminalStatus::ErrorLoop;
        }
    };

    let provenance = match strategy.kind {
        StrategyKind::AppendOnly => Provenance::Base,
        _ => Provenance::Online,
    };
    Ok(Episode {
        trajectory: Trajectory {
            task_id: task.task_id.clone(),
            task_prompt: task.task_prompt.clone(),
            system_prompt: task.system_prompt.clone(),
            steps,
            terminal_status: status,
            provenance,
        },
        contexts,
        final_context: state.rendered_tokens(),
    })
}

/// Folds the live workspace. The fold step keeps the policy's own thought
/// and action when it asked for the fold.
fn online_fold(
    state: &ContextState,
    summarizer: &Summarizer,
    round: u32,
    requested: Option<(String, ToolAction)>,
) -> Result<Step> {
    let input = CompressionInput::from_workspace(state)?;
    let block = summarizer.summarize(&input)?;
    let mut step = fold_step(round, input.point, &block);
    if let Some((thought, action)) = requested {
        step.thought = thought;
        step.action = action;
    }
    Ok(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub t: u32,
    /// Trajectories longer than `t` rounds.
    pub survivors: usize,
    /// Sum of their context tokens at `t`.
    pub token_sum: u64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    /// Per trajectory, the context at `t = 0..=len`; entry 0 is the fixed
    /// segment alone and entry `t` is the context after step `t`.
    pub curves: Vec<Vec<TokenCount>>,
    /// One row per `t` in `0..max_len`.
    pub rows: Vec<SurvivalRow>,
    pub statuses: Vec<TerminalStatus>,
}

impl RunAnalysis {
    pub fn max_context(&self) -> TokenCount {
        self.curves.iter().flatten().copied().max().unwrap_or_default()
    }

    /// Mean of A(t) over `t` in `range` where it is defined.
    pub fn mean_a(&self, range: std::ops::RangeInclusive<u32>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| range.contains(&r.t) && r.survivors > 0)
            .map(|r| r.mean)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Survival counts and mean context per round over replayed trajectories.
pub fn analyze_runs(trajs: &[Trajectory], retain_k: usize) -> Result<RunAnalysis> {
    if trajs.is_empty() {
        return Err(Error::EmptyInput("trajectory batch"));
    }
    let mut curves = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let q = ContextState::new(traj.system_prompt.as_str(), traj.task_prompt.as_str(), retain_k)?.rendered_tokens();
        let mut curve = vec![q];
        curve.extend(replay_contexts(traj, retain_k)?.into_iter().map(|(_, tokens)| tokens));
        curves.push(curve);
    }
    let max_len = trajs.iter().map(Trajectory::len).max().unwrap_or(0);
    let rows = (0..max_len)
        .map(|t| {
            let (survivors, token_sum) = trajs
                .iter()
                .zip(&curves)
                .filter(|(traj, _)| traj.len() > t)
                .fold((0usize, 0u64), |(n, sum), (_, curve)| (n + 1, sum + curve[t].0));
            SurvivalRow {
                t: t as u32,
                survivors,
                token_sum,
                mean: token_sum as f64 / survivors as f64,
            }
        })
        .collect();
    Ok(RunAnalysis {
        curves,
        rows,
        statuses: trajs.iter().map(|t| t.terminal_status).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub max_rounds: usize,
    pub tasks: usize,
    pub completed: usize,
    pub completion_rate: f64,
    /// Sum over episodes and rounds of the rendered context.
    pub total_tokens: u64,
    pub mean_final_context: f64,
}

impl SweepRow {
    pub fn from_episodes(strategy: StrategyKind, max_rounds: usize, episodes: &[Episode]) -> Self {
        let tasks = episodes.len();
        let completed = episodes
            .iter()
            .filter(|e| e.trajectory.terminal_status == TerminalStatus::SubmittedSuccess)
            .count();
        let total_tokens = episodes.iter().flat_map(|e| &e.contexts).map(|c| c.0).sum();
        let finals: u64 = episodes.iter().map(|e| e.final_context.0).sum();
        let per_task = |x: f64| if tasks == 0 { 0.0 } else { x / tasks as f64 };
        Self {
            strategy,
            max_rounds,
            tasks,
            completed,
            completion_rate: per_task(completed as f64),
            total_tokens,
            mean_final_context: per_task(finals as f64),
        }
    }
}

/// Runs `batch` for every (strategy, max_rounds) pair. `batch` gets the
/// strategy with `max_rounds` already applied and returns one episode per
/// task.
pub fn budget_sweep<F>(strategies: &[StrategyConfig], max_rounds: &[usize], mut batch: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&StrategyConfig) -> Result<Vec<Episode>>,
{
    let mut rows = Vec::with_capacity(strategies.len() * max_rounds.len());
    for strategy in strategies {
        for &rounds in max_rounds {
            let cfg = strategy.clone().with_max_rounds(rounds);
            let episodes = batch(&cfg)?;
            rows.push(SweepRow::from_episodes(cfg.kind, rounds, &episodes));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
