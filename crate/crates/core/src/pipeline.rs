//! Offline retrofit of one base trajectory: signals, plan, compression
//! inputs, memory blocks, stitching.

use tracing::debug;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::memory::{MemoryBlock, Summarizer};
use crate::planner::{build_compression_input, detect_signals, plan_insertions, PlannerConfig};
use crate::stitch::{stitch_with_text, RetrofitRecord};
use crate::tokens::TokenBudget;
use crate::trajectory::Trajectory;

pub struct Retrofitter {
    pub budget: TokenBudget,
    pub planner: PlannerConfig,
    pub summarizer: Summarizer,
    pub emit_context_text: bool,
}

impl Retrofitter {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            budget: cfg.budget,
            planner: cfg.planner.clone(),
            summarizer: Summarizer::new(cfg.summarizer.clone(), cfg.planner.failure_patterns.clone())?,
            emit_context_text: cfg.emit_context_text,
        })
    }

    /// Mock summarizer at `target_ratio`, default planner and budget.
    pub fn with_mock(target_ratio: f64) -> Self {
        Self {
            budget: TokenBudget::default(),
            planner: PlannerConfig::default(),
            summarizer: Summarizer::mock(target_ratio),
            emit_context_text: false,
        }
    }

    pub fn retrofit(&self, base: &Trajectory) -> Result<RetrofitRecord> {
        retrofit(base, &self.budget, &self.planner, &self.summarizer, self.emit_context_text)
    }
}

pub fn retrofit_trajectory(
    base: &Trajectory,
    budget: &TokenBudget,
    planner: &PlannerConfig,
    summarizer: &Summarizer,
) -> Result<RetrofitRecord> {
    retrofit(base, budget, planner, summarizer, false)
}

fn retrofit(
    base: &Trajectory,
    budget: &TokenBudget,
    planner: &PlannerConfig,
    summarizer: &Summarizer,
    emit_text: bool,
) -> Result<RetrofitRecord> {
    if let Some(v) = base.validate().into_iter().next() {
        return Err(Error::Consistency(v.to_string()));
    }
    let signals = detect_signals(base, budget, planner)?;
    let plan = plan_insertions(&signals, base, planner);
    debug!(task = %base.task_id, signals = signals.len(), points = ?plan.rounds(), "planned");
    let mut blocks: Vec<MemoryBlock> = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let input = build_compression_input(base, &plan, i, blocks.last().cloned(), planner.retain_k)?;
        blocks.push(summarizer.summarize(&input)?);
    }
    stitch_with_text(base, &plan, &blocks, planner.retain_k, budget, emit_text)
}
