//! Context folding for long-horizon software engineering agents.
//!
//! The context is kept as three segments: a fixed task segment, a structured
//! long-term memory block and a short window of recent steps. This crate
//! implements the workspace and its folding operation, the retrofit pipeline
//! that inserts fold steps into existing trajectories, the quality gate for
//! retrofitted data and a scripted runtime for comparing context strategies.

pub mod config;
pub mod error;
pub mod gate;
pub mod io;
pub mod memory;
pub mod patterns;
pub mod pipeline;
pub mod planner;
pub mod runtime;
pub mod stitch;
pub mod tokens;
pub mod trajectory;
pub mod workload;
pub mod workspace;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use gate::{corpus_stats, gate_trajectory, CorpusStats, GateConfig, Reason, StatsAccumulator, Verdict};
pub use memory::{merge_prior, MemoryBlock, Outcome, Strategy, Summarizer, SummarizerKind, SummarizerSpec};
pub use patterns::PatternSet;
pub use pipeline::{retrofit_trajectory, Retrofitter};
pub use planner::{
    build_compression_input, detect_signals, plan_insertions, CompressionInput, InsertionPlan, InsertionPoint,
    PlannerConfig, SignalKind, TriggerSignal,
};
pub use runtime::{
    analyze_runs, budget_sweep, run_episode, Environment, Episode, Policy, RunAnalysis, StrategyConfig, StrategyKind,
    SurvivalRow, SweepRow, TaskHeader,
};
pub use stitch::{replay_contexts, stitch, FoldRecord, RetrofitRecord, StepContext};
pub use tokens::{count_step, count_tokens, TokenBudget, TokenCount};
pub use trajectory::{
    slice_history, validate_trajectory, Provenance, Step, StepKind, TerminalStatus, ToolAction, ToolName, Trajectory,
};
pub use workspace::{init_workspace, ContextState, FixedSegment};
pub use workload::{FoldMode, TaskScript, Workload, WorkloadSpec};
