//! Condenser point selection and segmented compression inputs.
//!
//! [`detect_signals`] scans a base trajectory for three kinds of trigger,
//! [`plan_insertions`] greedily turns them into a spaced set of insertion
//! rounds, and [`build_compression_input`] cuts the history at each chosen
//! round into fixed, compressible and recent segments.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBlock;
use crate::patterns::PatternSet;
use crate::tokens::{count_step, TokenBudget, TokenCount, BYTES_PER_TOKEN};
use crate::trajectory::{Provenance, Step, Trajectory};
use crate::workspace::{step_render_len, ContextState, FixedSegment, DEFAULT_RETAIN_K};

pub const DEFAULT_MILESTONE_PATTERNS: &[&str] = &[r"\ball tests pass", r"\breproduced\b", r"\bmilestone\b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Expansion,
    Boundary,
    ErrorCorrection,
}

impl SignalKind {
    pub fn is_mandatory(self) -> bool {
        self == SignalKind::Expansion
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSignal {
    pub kind: SignalKind,
    pub round: u32,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPoint {
    pub round: u32,
    pub signals: Vec<TriggerSignal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub points: Vec<InsertionPoint>,
    pub min_spacing: u32,
    pub retain_k: usize,
}

impl InsertionPlan {
    pub fn empty(min_spacing: u32, retain_k: usize) -> Self {
        Self {
            points: Vec::new(),
            min_spacing,
            retain_k,
        }
    }

    pub fn rounds(&self) -> Vec<u32> {
        self.points.iter().map(|p| p.round).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Overrides the budget's soft threshold for expansion detection.
    #[serde(default)]
    pub soft_threshold_fraction: Option<f64>,
    #[serde(default = "default_run_min")]
    pub run_min: usize,
    #[serde(default = "default_fail_min")]
    pub fail_min: usize,
    #[serde(default = "default_min_spacing")]
    pub min_spacing: u32,
    #[serde(default = "default_retain_k")]
    pub retain_k: usize,
    #[serde(default)]
    pub failure_patterns: PatternSet,
    #[serde(default = "default_milestones")]
    pub milestone_patterns: PatternSet,
    /// Upper estimate of block size relative to its input, used when
    /// simulating folds for expansion detection.
    #[serde(default = "default_ratio_estimate")]
    pub memory_ratio_estimate: f64,
    #[serde(default = "default_overhead")]
    pub memory_overhead_tokens: u64,
}

fn default_run_min() -> usize {
    4
}
fn default_fail_min() -> usize {
    3
}
fn default_min_spacing() -> u32 {
    10
}
fn default_retain_k() -> usize {
    DEFAULT_RETAIN_K
}
fn default_milestones() -> PatternSet {
    PatternSet::new(DEFAULT_MILESTONE_PATTERNS.iter().copied()).expect("default patterns compile")
}
fn default_ratio_estimate() -> f64 {
    0.35
}
fn default_overhead() -> u64 {
    128
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            soft_threshold_fraction: None,
            run_min: default_run_min(),
            fail_min: default_fail_min(),
            min_spacing: default_min_spacing(),
            retain_k: default_retain_k(),
            failure_patterns: PatternSet::failure_defaults(),
            milestone_patterns: default_milestones(),
            memory_ratio_estimate: default_ratio_estimate(),
            memory_overhead_tokens: default_overhead(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("run_min", self.run_min as u64),
            ("fail_min", self.fail_min as u64),
            ("min_spacing", self.min_spacing as u64),
            ("retain_k", self.retain_k as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("planner.{name} must be positive")));
            }
        }
        if let Some(f) = self.soft_threshold_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("planner.soft_threshold_fraction {f} not in (0, 1]")));
            }
        }
        if !(self.memory_ratio_estimate > 0.0 && self.memory_ratio_estimate < 1.0) {
            return Err(Error::Config("planner.memory_ratio_estimate must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn soft_threshold(&self, budget: &TokenBudget) -> TokenCount {
        let fraction = self.soft_threshold_fraction.unwrap_or(budget.soft_threshold_fraction);
        budget.max_context.scale(fraction)
    }
}

/// Emits expansion, boundary and error-correction signals for a base
/// trajectory, sorted by round.
///
/// Expansion: the context is simulated step by step; a signal fires whenever
/// it reaches the soft threshold and a fold is possible, after which the
/// simulation folds with a memory block estimated at
/// `memory_ratio_estimate` of its input plus a fixed overhead. Until the
/// first signal this is exactly the append-only rendering.
pub fn detect_signals(traj: &Trajectory, budget: &TokenBudget, cfg: &PlannerConfig) -> Result<Vec<TriggerSignal>> {
    if traj.provenance != Provenance::Base {
        return Err(Error::Provenance {
            expected: "base",
            found: provenance_name(traj.provenance),
        });
    }
    let mut signals = expansion_signals(traj, budget, cfg);
    signals.extend(boundary_signals(&traj.steps, cfg));
    signals.extend(error_correction_signals(&traj.steps, cfg));
    signals.sort_by_key(|s| (s.round, s.kind));
    Ok(signals)
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Base => "base",
        Provenance::Retrofitted => "retrofitted",
        Provenance::Online => "online",
    }
}

fn expansion_signals(traj: &Trajectory, budget: &TokenBudget, cfg: &PlannerConfig) -> Vec<TriggerSignal> {
    let soft = cfg.soft_threshold(budget);
    let k = cfg.retain_k;
    let fixed_bytes = FixedSegment::new(traj.system_prompt.as_str(), traj.task_prompt.as_str()).render_len();
    let mut memory_bytes = 0usize;
    let mut memory_tokens = TokenCount::ZERO;
    // (render bytes, estimated tokens) per working step
    let mut working: VecDeque<(usize, TokenCount)> = VecDeque::new();
    let mut working_bytes = 0usize;
    let mut out = Vec::new();

    for step in &traj.steps {
        let len = step_render_len(step);
        working.push_back((len, count_step(step)));
        working_bytes += len;
        let tokens = TokenCount::from_byte_len(fixed_bytes + memory_bytes + working_bytes);
        if tokens >= soft && working.len() > k {
            out.push(TriggerSignal {
                kind: SignalKind::Expansion,
                round: step.index,
                evidence: format!("context {tokens} tokens reached soft threshold {soft}"),
            });
            let mut evicted = memory_tokens;
            while working.len() > k {
                let (b, t) = working.pop_front().expect("non-empty");
                working_bytes -= b;
                evicted += t;
            }
            memory_tokens = TokenCount(
                (evicted.0 as f64 * cfg.memory_ratio_estimate).ceil() as u64 + cfg.memory_overhead_tokens,
            );
            memory_bytes = memory_tokens.0 as usize * BYTES_PER_TOKEN;
        }
    }
    out
}

fn boundary_signals(steps: &[Step], cfg: &PlannerConfig) -> Vec<TriggerSignal> {
    let mut out = Vec::new();
    let mut run_start = 0;
    for i in 1..=steps.len() {
        let switched = i == steps.len() || steps[i].action.tool_name != steps[run_start].action.tool_name;
        if !switched {
            continue;
        }
        let run_len = i - run_start;
        if i < steps.len() && run_len >= cfg.run_min {
            let last = &steps[i - 1];
            out.push(TriggerSignal {
                kind: SignalKind::Boundary,
                round: last.index,
                evidence: format!(
                    "{run_len} consecutive {} steps end, next is {}",
                    last.action.tool_name, steps[i].action.tool_name
                ),
            });
        }
        run_start = i;
    }
    // milestones; the final step is never a boundary since nothing follows it
    for step in steps.iter().take(steps.len().saturating_sub(1)) {
        if cfg.milestone_patterns.is_match(&step.observation) {
            out.push(TriggerSignal {
                kind: SignalKind::Boundary,
                round: step.index,
                evidence: "milestone marker in observation".into(),
            });
        }
    }
    out
}

fn error_correction_signals(steps: &[Step], cfg: &PlannerConfig) -> Vec<TriggerSignal> {
    let mut out = Vec::new();
    let mut failing_run = 0usize;
    for step in steps {
        if cfg.failure_patterns.is_match(&step.observation) {
            failing_run += 1;
            continue;
        }
        if failing_run >= cfg.fail_min {
            out.push(TriggerSignal {
                kind: SignalKind::ErrorCorrection,
                round: step.index,
                evidence: format!("first success after {failing_run} failing observations"),
            });
        }
        failing_run = 0;
    }
    out
}

/// Greedy earliest-first selection of insertion rounds.
///
/// Signals whose rounds fall within `min_spacing` of the first unhandled
/// signal form one window. The window's point is its earliest expansion
/// round if any, otherwise its earliest round; only rounds leaving at least
/// `retain_k + 1` uncovered steps qualify. The point carries every window
/// signal at or before it. Signals closer than `min_spacing` after a chosen
/// point are merged away.
pub fn plan_insertions(signals: &[TriggerSignal], traj: &Trajectory, cfg: &PlannerConfig) -> InsertionPlan {
    let k = cfg.retain_k as u32;
    let spacing = cfg.min_spacing;
    let mut sorted: Vec<&TriggerSignal> = signals.iter().collect();
    sorted.sort_by_key(|s| (s.round, s.kind));
    // a fold after the final step would follow the submit
    let last_round = traj.steps.len() as u32;
    sorted.retain(|s| s.round >= 1 && s.round < last_round);

    let mut plan = InsertionPlan::empty(spacing, cfg.retain_k);
    let mut covered_end = 0u32;
    let mut last_point: Option<u32> = None;
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i].round;
        if last_point.is_some_and(|p| start < p + spacing) {
            i += 1;
            continue;
        }
        let window: Vec<&TriggerSignal> = sorted[i..]
            .iter()
            .take_while(|s| s.round < start + spacing)
            .copied()
            .collect();
        let valid = |s: &&&TriggerSignal| s.round > covered_end + k;
        let chosen = window
            .iter()
            .filter(valid)
            .find(|s| s.kind.is_mandatory())
            .or_else(|| window.iter().find(valid))
            .map(|s| s.round);
        let Some(point) = chosen else {
            i += 1;
            continue;
        };
        let carried: Vec<TriggerSignal> = window
            .iter()
            .filter(|s| s.round <= point)
            .map(|s| (*s).clone())
            .collect();
        plan.points.push(InsertionPoint {
            round: point,
            signals: carried,
        });
        covered_end = point - k;
        last_point = Some(point);
        i += 1;
    }
    plan
}

/// The segmented context at one insertion point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionInput {
    pub point: u32,
    pub fixed: FixedSegment,
    pub recent: Vec<Step>,
    pub compressible: Vec<Step>,
    pub prior_block: Option<MemoryBlock>,
}

impl CompressionInput {
    pub fn new(
        point: u32,
        fixed: FixedSegment,
        recent: Vec<Step>,
        compressible: Vec<Step>,
        prior_block: Option<MemoryBlock>,
    ) -> Result<Self> {
        if compressible.is_empty() {
            return Err(Error::Planning(format!("empty compressible segment at round {point}")));
        }
        Ok(Self {
            point,
            fixed,
            recent,
            compressible,
            prior_block,
        })
    }

    /// Segments the live workspace: everything but the last `retain_k`
    /// working steps is compressible.
    pub fn from_workspace(state: &ContextState) -> Result<Self> {
        let k = state.retain_k();
        let steps = state.working().steps();
        if steps.len() <= k {
            return Err(Error::FoldRejected {
                working: steps.len(),
                retain_k: k,
            });
        }
        let (compressible, recent) = steps.split_at(steps.len() - k);
        Self::new(
            steps[steps.len() - 1].source_id(),
            state.fixed().clone(),
            recent.to_vec(),
            compressible.to_vec(),
            state.memory().block().cloned(),
        )
    }

    pub fn compressible_tokens(&self) -> TokenCount {
        self.compressible.iter().map(count_step).sum()
    }

    /// Rounds the resulting block must cover: the prior block's plus the
    /// compressible steps'.
    pub fn covered_ids(&self) -> Vec<u32> {
        let mut ids = self
            .prior_block
            .as_ref()
            .map(|b| b.covered_step_ids.clone())
            .unwrap_or_default();
        ids.extend(self.compressible.iter().map(Step::source_id));
        ids
    }
}

/// Builds the compression input for the `ordinal`-th point (0-based).
pub fn build_compression_input(
    traj: &Trajectory,
    plan: &InsertionPlan,
    ordinal: usize,
    prior: Option<MemoryBlock>,
    retain_k: usize,
) -> Result<CompressionInput> {
    let point = plan
        .points
        .get(ordinal)
        .ok_or(Error::Range {
            value: ordinal + 1,
            len: plan.points.len(),
        })?
        .round as usize;
    if point > traj.steps.len() {
        return Err(Error::Range {
            value: point,
            len: traj.steps.len(),
        });
    }
    let prev_end = match ordinal {
        0 => 0,
        _ => (plan.points[ordinal - 1].round as usize).saturating_sub(retain_k),
    };
    match (&prior, ordinal) {
        (Some(_), 0) => {
            return Err(Error::Planning("first point cannot have a prior block".into()));
        }
        (None, o) if o > 0 => {
            return Err(Error::Planning(format!("point {} needs the prior block", o + 1)));
        }
        (Some(b), _) if b.covered_step_ids.last().copied() != Some(prev_end as u32) => {
            return Err(Error::Planning(format!(
                "prior block ends at {:?}, previous point covered up to {prev_end}",
                b.covered_step_ids.last()
            )));
        }
        _ => {}
    }
    let recent_start = point.saturating_sub(retain_k);
    if recent_start <= prev_end {
        return Err(Error::Planning(format!(
            "no compressible steps at round {point}: covered up to {prev_end}, retain_k={retain_k}"
        )));
    }
    CompressionInput::new(
        point as u32,
        FixedSegment::new(traj.system_prompt.as_str(), traj.task_prompt.as_str()),
        traj.steps[recent_start..point].to_vec(),
        traj.steps[prev_end..recent_start].to_vec(),
        prior,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Summarizer;
    use crate::trajectory::{TerminalStatus, ToolAction};

    fn base(steps: Vec<Step>) -> Trajectory {
        Trajectory {
            task_id: "t".into(),
            task_prompt: "fix".into(),
            system_prompt: "sys".into(),
            steps,
            terminal_status: TerminalStatus::SubmittedSuccess,
            provenance: Provenance::Base,
        }
    }

    fn tiny(n: u32, tool: &str) -> Trajectory {
        base((1..=n).map(|i| Step::new(i, "t", ToolAction::new(tool, "x"), "ok")).collect())
    }

    fn sig(kind: SignalKind, round: u32) -> TriggerSignal {
        TriggerSignal {
            kind,
            round,
            evidence: String::new(),
        }
    }

    #[test]
    fn quiet_trajectory_has_no_signals() {
        let t = tiny(30, "execute_bash");
        let s = detect_signals(&t, &TokenBudget::default(), &PlannerConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn rejects_non_base() {
        let mut t = tiny(3, "execute_bash");
        t.provenance = Provenance::Retrofitted;
        assert!(matches!(
            detect_signals(&t, &TokenBudget::default(), &PlannerConfig::default()),
            Err(Error::Provenance { .. })
        ));
    }

    #[test]
    fn error_correction_fires_once_at_recovery() {
        // rounds 1-5 quiet, 6-8 fail, 9 passes, 10-12 quiet; one tool throughout
        let obs = |i: u32| match i {
            6..=8 => "FAILED test_parse".to_string(),
            _ => "ok".to_string(),
        };
        let t = base(
            (1..=12)
                .map(|i| Step::new(i, "t", ToolAction::new("execute_bash", "pytest"), obs(i)))
                .collect(),
        );
        let s = detect_signals(&t, &TokenBudget::default(), &PlannerConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].kind, s[0].round), (SignalKind::ErrorCorrection, 9));
    }

    #[test]
    fn two_failures_are_not_enough() {
        let obs = |i: u32| if i == 3 || i == 4 { "Error" } else { "ok" };
        let t = base(
            (1..=8)
                .map(|i| Step::new(i, "t", ToolAction::new("execute_bash", "pytest"), obs(i)))
                .collect(),
        );
        assert!(detect_signals(&t, &TokenBudget::default(), &PlannerConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn boundary_after_long_run() {
        let mut steps: Vec<Step> = (1..=4)
            .map(|i| Step::new(i, "t", ToolAction::new("execute_bash", "ls"), "ok"))
            .collect();
        steps.push(Step::new(5, "t", ToolAction::new("str_replace_editor", "edit"), "ok"));
        steps.push(Step::new(6, "t", ToolAction::new("execute_bash", "ls"), "ok"));
        let s = detect_signals(&base(steps), &TokenBudget::default(), &PlannerConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].kind, s[0].round), (SignalKind::Boundary, 4));
    }

    #[test]
    fn milestone_marker_is_boundary() {
        let mut t = tiny(10, "execute_bash");
        t.steps[4].observation = "All tests passed".into();
        let s = detect_signals(&t, &TokenBudget::default(), &PlannerConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].kind, s[0].round), (SignalKind::Boundary, 5));
    }

    #[test]
    fn empty_signals_empty_plan() {
        let plan = plan_insertions(&[], &tiny(50, "execute_bash"), &PlannerConfig::default());
        assert!(plan.is_empty());
    }

    #[test]
    fn close_expansions_keep_the_first() {
        let t = tiny(60, "execute_bash");
        let plan = plan_insertions(
            &[sig(SignalKind::Expansion, 40), sig(SignalKind::Expansion, 45)],
            &t,
            &PlannerConfig::default(),
        );
        assert_eq!(plan.rounds(), vec![40]);
    }

    #[test]
    fn boundary_merges_into_following_expansion() {
        let t = tiny(60, "execute_bash");
        let plan = plan_insertions(
            &[sig(SignalKind::Boundary, 12), sig(SignalKind::Expansion, 13)],
            &t,
            &PlannerConfig::default(),
        );
        assert_eq!(plan.rounds(), vec![13]);
        let kinds: Vec<_> = plan.points[0].signals.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![SignalKind::Boundary, SignalKind::Expansion]);
    }

    #[test]
    fn points_need_a_compressible_prefix() {
        let t = tiny(60, "execute_bash");
        // k = 5: round 5 leaves nothing to compress, round 6 leaves one step
        let plan = plan_insertions(&[sig(SignalKind::Boundary, 5)], &t, &PlannerConfig::default());
        assert!(plan.is_empty());
        let plan = plan_insertions(&[sig(SignalKind::Expansion, 6)], &t, &PlannerConfig::default());
        assert_eq!(plan.rounds(), vec![6]);
        // no point on the final step
        let plan = plan_insertions(&[sig(SignalKind::Expansion, 60)], &t, &PlannerConfig::default());
        assert!(plan.is_empty());
    }

    fn plan_of(rounds: &[u32]) -> InsertionPlan {
        InsertionPlan {
            points: rounds
                .iter()
                .map(|&r| InsertionPoint {
                    round: r,
                    signals: vec![sig(SignalKind::Expansion, r)],
                })
                .collect(),
            min_spacing: 10,
            retain_k: 5,
        }
    }

    fn ids(steps: &[Step]) -> Vec<u32> {
        steps.iter().map(|s| s.index).collect()
    }

    #[test]
    fn compression_input_segments() {
        let t = tiny(50, "execute_bash");
        let plan = plan_of(&[20, 40]);
        let first = build_compression_input(&t, &plan, 0, None, 5).unwrap();
        assert_eq!(ids(&first.compressible), (1..=15).collect::<Vec<_>>());
        assert_eq!(ids(&first.recent), (16..=20).collect::<Vec<_>>());

        let block = Summarizer::mock(0.3).summarize(&first).unwrap();
        let second = build_compression_input(&t, &plan, 1, Some(block), 5).unwrap();
        assert_eq!(ids(&second.compressible), (16..=35).collect::<Vec<_>>());
        assert_eq!(ids(&second.recent), (36..=40).collect::<Vec<_>>());
        assert_eq!(second.covered_ids(), (1..=35).collect::<Vec<_>>());

        let edge = build_compression_input(&t, &plan_of(&[6]), 0, None, 5).unwrap();
        assert_eq!(ids(&edge.compressible), vec![1]);
    }

    #[test]
    fn compression_input_errors() {
        let t = tiny(50, "execute_bash");
        assert!(matches!(
            build_compression_input(&t, &plan_of(&[5]), 0, None, 5),
            Err(Error::Planning(_))
        ));
        assert!(matches!(
            build_compression_input(&t, &plan_of(&[20, 40]), 1, None, 5),
            Err(Error::Planning(_))
        ));
        assert!(matches!(
            build_compression_input(&t, &plan_of(&[20]), 3, None, 5),
            Err(Error::Range { .. })
        ));
    }
}
