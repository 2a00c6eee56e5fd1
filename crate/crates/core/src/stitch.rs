//! Minimal-intrusion stitching of fold steps into base trajectories, and
//! replay of per-round context sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBlock;
use crate::planner::InsertionPlan;
use crate::tokens::{TokenBudget, TokenCount};
use crate::trajectory::{Provenance, Step, StepKind, ToolAction, Trajectory};
use crate::workspace::ContextState;

/// Context maintained after the step at `round` was applied. The input for
/// the response at round `t` is the entry for `t - 1` (or the fixed segment
/// alone when `t = 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepContext {
    pub round: u32,
    pub tokens: TokenCount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRecord {
    /// Index of the fold step in the retrofitted trajectory.
    pub round: u32,
    /// Insertion point in the base trajectory.
    pub base_round: u32,
    pub block_tokens: TokenCount,
    pub compressible_tokens: TokenCount,
}

impl FoldRecord {
    pub fn ratio(&self) -> f64 {
        self.block_tokens.0 as f64 / self.compressible_tokens.0 as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrofitRecord {
    pub trajectory: Trajectory,
    pub retain_k: usize,
    pub per_step_contexts: Vec<StepContext>,
    pub fold_log: Vec<FoldRecord>,
}

impl RetrofitRecord {
    /// Memory blocks of the fold steps, in order.
    pub fn blocks(&self) -> Result<Vec<(u32, MemoryBlock)>> {
        self.trajectory
            .steps
            .iter()
            .filter(|s| s.is_fold())
            .map(|s| {
                MemoryBlock::parse(&s.observation)
                    .map(|b| (s.index, b))
                    .map_err(|e| Error::FoldParse {
                        round: s.index,
                        message: e.to_string(),
                    })
            })
            .collect()
    }
}

pub fn fold_step(index: u32, base_round: u32, block: &MemoryBlock) -> Step {
    let (first, last) = block.source_range;
    let note = format!("condense rounds {first}-{last} into long-term memory");
    Step {
        index,
        thought: format!(
            "The history up to round {base_round} is long; condensing rounds {first}-{last} before continuing."
        ),
        action: ToolAction::context(note),
        observation: block.serialize(),
        step_kind: StepKind::ContextFold,
        base_index: None,
    }
}

/// Inserts one fold step after each planned base round and replays the
/// result through the workspace.
pub fn stitch(
    base: &Trajectory,
    plan: &InsertionPlan,
    blocks: &[MemoryBlock],
    retain_k: usize,
    budget: &TokenBudget,
) -> Result<RetrofitRecord> {
    stitch_with_text(base, plan, blocks, retain_k, budget, false)
}

pub fn stitch_with_text(
    base: &Trajectory,
    plan: &InsertionPlan,
    blocks: &[MemoryBlock],
    retain_k: usize,
    budget: &TokenBudget,
    emit_text: bool,
) -> Result<RetrofitRecord> {
    if base.provenance != Provenance::Base {
        return Err(Error::Provenance {
            expected: "base",
            found: "non-base",
        });
    }
    if blocks.len() != plan.points.len() {
        return Err(Error::Consistency(format!(
            "{} blocks for {} insertion points",
            blocks.len(),
            plan.points.len()
        )));
    }

    let mut steps = Vec::with_capacity(base.steps.len() + blocks.len());
    let mut points = plan.points.iter().zip(blocks).peekable();
    let mut pending: Vec<(u32, u32, &MemoryBlock)> = Vec::new();
    for step in &base.steps {
        let mut s = step.clone();
        s.index = steps.len() as u32 + 1;
        s.base_index = Some(step.index);
        steps.push(s);
        if let Some((point, block)) = points.next_if(|(p, _)| p.round == step.index) {
            let index = steps.len() as u32 + 1;
            steps.push(fold_step(index, point.round, block));
            pending.push((index, point.round, block));
        }
    }
    if let Some((point, _)) = points.next() {
        return Err(Error::Consistency(format!(
            "insertion point {} is not a base round in order",
            point.round
        )));
    }

    let trajectory = Trajectory {
        task_id: base.task_id.clone(),
        task_prompt: base.task_prompt.clone(),
        system_prompt: base.system_prompt.clone(),
        steps,
        terminal_status: base.terminal_status,
        provenance: Provenance::Retrofitted,
    };

    let mut state = ContextState::new(trajectory.system_prompt.as_str(), trajectory.task_prompt.as_str(), retain_k)?;
    let mut per_step_contexts = Vec::with_capacity(trajectory.steps.len());
    for step in &trajectory.steps {
        state.apply(step)?;
        let tokens = state.rendered_tokens();
        if tokens > budget.max_context {
            return Err(Error::BudgetOverflow {
                round: step.index,
                tokens: tokens.0,
                max: budget.max_context.0,
            });
        }
        per_step_contexts.push(StepContext {
            round: step.index,
            tokens,
            text: emit_text.then(|| state.render().text),
        });
    }

    let fold_log = pending
        .into_iter()
        .map(|(round, base_round, block)| FoldRecord {
            round,
            base_round,
            block_tokens: block.token_size,
            compressible_tokens: block.input_tokens,
        })
        .collect();

    Ok(RetrofitRecord {
        trajectory,
        retain_k,
        per_step_contexts,
        fold_log,
    })
}

/// Rendered token count after each step, applying folds where they occur.
pub fn replay_contexts(traj: &Trajectory, retain_k: usize) -> Result<Vec<(u32, TokenCount)>> {
    let mut state = ContextState::new(traj.system_prompt.as_str(), traj.task_prompt.as_str(), retain_k)?;
    traj.steps
        .iter()
        .map(|step| {
            state.apply(step)?;
            Ok((step.index, state.rendered_tokens()))
        })
        .collect()
}
