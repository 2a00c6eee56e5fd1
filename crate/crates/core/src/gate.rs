//! Rejection rules for retrofitted trajectories and corpus statistics.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::memory::{MemoryBlock, Outcome, SummarizerKind};
use crate::patterns::PatternSet;
use crate::stitch::RetrofitRecord;
use crate::trajectory::{StepKind, TerminalStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    #[serde(default = "yes")]
    pub require_success: bool,
    #[serde(default = "default_trailing")]
    pub max_trailing_errors: usize,
    /// At most `.0` folds in any `.1` consecutive rounds.
    #[serde(default = "default_fold_window")]
    pub max_folds_per_window: (usize, u32),
    #[serde(default = "default_factor")]
    pub min_compression_factor: f64,
    #[serde(default = "default_coverage")]
    pub drift_coverage_min: f64,
    #[serde(default = "yes")]
    pub consistency_check: bool,
    #[serde(default)]
    pub failure_patterns: PatternSet,
}

fn yes() -> bool {
    true
}
fn default_trailing() -> usize {
    5
}
fn default_fold_window() -> (usize, u32) {
    (2, 20)
}
fn default_factor() -> f64 {
    2.0
}
fn default_coverage() -> f64 {
    0.9
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            require_success: true,
            max_trailing_errors: default_trailing(),
            max_folds_per_window: default_fold_window(),
            min_compression_factor: default_factor(),
            drift_coverage_min: default_coverage(),
            consistency_check: true,
            failure_patterns: PatternSet::failure_defaults(),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_trailing_errors == 0 {
            return Err(Error::Config("max_trailing_errors must be positive".into()));
        }
        if self.max_folds_per_window.0 == 0 || self.max_folds_per_window.1 == 0 {
            return Err(Error::Config("max_folds_per_window entries must be positive".into()));
        }
        if self.min_compression_factor.is_nan() || self.min_compression_factor <= 0.0 {
            return Err(Error::Config("min_compression_factor must be positive".into()));
        }
        if !(self.drift_coverage_min > 0.0 && self.drift_coverage_min <= 1.0) {
            return Err(Error::Config(format!(
                "drift_coverage_min {} not in (0, 1]",
                self.drift_coverage_min
            )));
        }
        Ok(())
    }
}

/// Stable rejection reason codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    TerminalStatus,
    UnrecoverableError,
    ExcessiveFoldFrequency,
    MinimalInformationGain,
    SemanticDrift,
    StateInconsistency,
}

impl Reason {
    pub const ALL: [Reason; 6] = [
        Reason::TerminalStatus,
        Reason::UnrecoverableError,
        Reason::ExcessiveFoldFrequency,
        Reason::MinimalInformationGain,
        Reason::SemanticDrift,
        Reason::StateInconsistency,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Reason::TerminalStatus => "terminal_status",
            Reason::UnrecoverableError => "unrecoverable_error",
            Reason::ExcessiveFoldFrequency => "excessive_fold_frequency",
            Reason::MinimalInformationGain => "minimal_information_gain",
            Reason::SemanticDrift => "semantic_drift",
            Reason::StateInconsistency => "state_inconsistency",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reasons", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(Vec<Reason>),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    pub fn reasons(&self) -> &[Reason] {
        match self {
            Verdict::Accept => &[],
            Verdict::Reject(r) => r,
        }
    }
}

/// Applies every rule and returns all reasons that fire, in code order.
pub fn gate_trajectory(record: &RetrofitRecord, cfg: &GateConfig) -> Verdict {
    let traj = &record.trajectory;
    let mut reasons = Vec::new();

    if cfg.require_success && traj.terminal_status != TerminalStatus::SubmittedSuccess {
        reasons.push(Reason::TerminalStatus);
    }

    let env: Vec<_> = traj.environment_steps().collect();
    let n = cfg.max_trailing_errors;
    if env.len() >= n && env[env.len() - n..].iter().all(|s| cfg.failure_patterns.is_match(&s.observation)) {
        reasons.push(Reason::UnrecoverableError);
    }

    let fold_rounds: Vec<u32> = traj.steps.iter().filter(|s| s.is_fold()).map(|s| s.index).collect();
    let (max_folds, window) = cfg.max_folds_per_window;
    if fold_rounds.windows(max_folds + 1).any(|w| w[max_folds] - w[0] < window) {
        reasons.push(Reason::ExcessiveFoldFrequency);
    }

    let mut blocks = Vec::with_capacity(fold_rounds.len());
    let mut unparseable = false;
    for step in traj.steps.iter().filter(|s| s.is_fold()) {
        match MemoryBlock::parse(&step.observation) {
            Ok(b) => blocks.push((step.index, b)),
            Err(e) => {
                debug!(round = step.index, error = %e, "fold observation does not parse");
                unparseable = true;
            }
        }
    }

    if blocks
        .iter()
        .any(|(_, b)| (b.input_tokens.0 as f64) < cfg.min_compression_factor * b.token_size.0 as f64)
    {
        reasons.push(Reason::MinimalInformationGain);
    }

    if blocks
        .iter()
        .any(|(round, b)| coverage(record, *round, b) < cfg.drift_coverage_min)
    {
        reasons.push(Reason::SemanticDrift);
    }

    if unparseable || (cfg.consistency_check && blocks.iter().any(|(_, b)| !consistent(record, b, &cfg.failure_patterns))) {
        reasons.push(Reason::StateInconsistency);
    }

    if reasons.is_empty() {
        Verdict::Accept
    } else {
        Verdict::Reject(reasons)
    }
}

/// Fraction of the rounds a fold at `round` should have condensed that the
/// block actually lists. Those are all environment steps before the fold
/// except the last `retain_k`.
fn coverage(record: &RetrofitRecord, round: u32, block: &MemoryBlock) -> f64 {
    let before: Vec<u32> = record
        .trajectory
        .steps
        .iter()
        .take_while(|s| s.index < round)
        .filter(|s| s.step_kind == StepKind::Environment)
        .map(|s| s.source_id())
        .collect();
    let expected = &before[..before.len().saturating_sub(record.retain_k)];
    if expected.is_empty() {
        return 0.0;
    }
    let covered: HashSet<u32> = block.covered_step_ids.iter().copied().collect();
    let hit = expected.iter().filter(|id| covered.contains(id)).count();
    hit as f64 / expected.len() as f64
}

/// Every succeeded strategy must point at some round whose observation is
/// not a failure. Chat-model blocks only get a schema check.
fn consistent(record: &RetrofitRecord, block: &MemoryBlock, failure: &PatternSet) -> bool {
    if block.generator == SummarizerKind::ChatModel {
        debug!(range = ?block.source_range, "chat-model block: consistency limited to schema completeness");
        return !block.is_empty() && block.strategies.iter().all(|s| !s.attempt.trim().is_empty());
    }
    block
        .strategies
        .iter()
        .filter(|s| s.outcome == Outcome::Succeeded)
        .all(|s| {
            s.rounds.iter().any(|&id| {
                record
                    .trajectory
                    .environment_steps()
                    .find(|step| step.source_id() == id)
                    .is_some_and(|step| !failure.is_match(&step.observation))
            })
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg: f64,
    pub median: f64,
    pub max: u64,
}

impl Summary {
    /// Mean, median (mean of the two middle values for even counts) and max.
    pub fn of(values: &mut [u64]) -> Self {
        if values.is_empty() {
            return Self {
                avg: 0.0,
                median: 0.0,
                max: 0,
            };
        }
        values.sort_unstable();
        let n = values.len();
        let sum: u128 = values.iter().map(|&v| v as u128).sum();
        let median = if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
        };
        Self {
            avg: sum as f64 / n as f64,
            median,
            max: values[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_trajectories: usize,
    pub steps: Summary,
    /// Rendered context per step.
    pub tokens_per_step: Summary,
    pub folds: Summary,
    pub n_folds: usize,
    pub tokens_before_avg: f64,
    pub tokens_after_avg: f64,
    pub ratio_avg: f64,
}

pub fn corpus_stats(records: &[RetrofitRecord]) -> Result<CorpusStats> {
    let mut acc = StatsAccumulator::default();
    records.iter().for_each(|r| acc.add(r));
    acc.finish()
}

/// Collects the numbers behind [`CorpusStats`] one record at a time.
#[derive(Debug, Default)]
pub struct StatsAccumulator {
    steps: Vec<u64>,
    per_step: Vec<u64>,
    folds: Vec<u64>,
    before: f64,
    after: f64,
    ratio: f64,
    n_folds: usize,
}

impl StatsAccumulator {
    pub fn add(&mut self, record: &RetrofitRecord) {
        self.steps.push(record.trajectory.len() as u64);
        self.per_step.extend(record.per_step_contexts.iter().map(|c| c.tokens.0));
        self.folds.push(record.fold_log.len() as u64);
        for f in &record.fold_log {
            self.before += f.compressible_tokens.0 as f64;
            self.after += f.block_tokens.0 as f64;
            self.ratio += f.ratio();
            self.n_folds += 1;
        }
    }

    pub fn finish(mut self) -> Result<CorpusStats> {
        if self.steps.is_empty() {
            return Err(Error::EmptyInput("corpus"));
        }
        let per_fold = |x: f64| if self.n_folds == 0 { 0.0 } else { x / self.n_folds as f64 };
        Ok(CorpusStats {
            n_trajectories: self.steps.len(),
            steps: Summary::of(&mut self.steps),
            tokens_per_step: Summary::of(&mut self.per_step),
            folds: Summary::of(&mut self.folds),
            n_folds: self.n_folds,
            tokens_before_avg: per_fold(self.before),
            tokens_after_avg: per_fold(self.after),
            ratio_avg: per_fold(self.ratio),
        })
    }
}

impl CorpusStats {
    pub fn table(&self) -> String {
        let rows: [(&str, String); 13] = [
            ("Trajectories", self.n_trajectories.to_string()),
            ("Avg steps", format!("{:.2}", self.steps.avg)),
            ("Median steps", format!("{:.1}", self.steps.median)),
            ("Max steps", self.steps.max.to_string()),
            ("Avg tokens per step", format!("{:.2}", self.tokens_per_step.avg)),
            ("Median tokens per step", format!("{:.1}", self.tokens_per_step.median)),
            ("Max tokens per step", self.tokens_per_step.max.to_string()),
            ("Avg folds", format!("{:.2}", self.folds.avg)),
            ("Median folds", format!("{:.1}", self.folds.median)),
            ("Max folds", self.folds.max.to_string()),
            ("Avg tokens before", format!("{:.2}", self.tokens_before_avg)),
            ("Avg tokens after", format!("{:.2}", self.tokens_after_avg)),
            ("Avg ratio (%)", format!("{:.2}", self.ratio_avg * 100.0)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v:>12}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Strategy, Summarizer};
    use crate::planner::{build_compression_input, InsertionPlan, InsertionPoint};
    use crate::stitch::{stitch, FoldRecord};
    use crate::tokens::{TokenBudget, TokenCount};
    use crate::trajectory::{Provenance, Step, ToolAction, Trajectory};

    fn base(n: u32, obs: impl Fn(u32) -> String) -> Trajectory {
        Trajectory {
            task_id: "g".into(),
            task_prompt: "fix".into(),
            system_prompt: "sys".into(),
            steps: (1..=n)
                .map(|i| Step::new(i, format!("t{i}"), ToolAction::new("execute_bash", format!("run {i}")), obs(i)))
                .collect(),
            terminal_status: TerminalStatus::SubmittedSuccess,
            provenance: Provenance::Base,
        }
    }

    fn retrofit(t: &Trajectory, rounds: &[u32], ratio: f64) -> RetrofitRecord {
        let plan = InsertionPlan {
            points: rounds.iter().map(|&round| InsertionPoint { round, signals: vec![] }).collect(),
            min_spacing: 10,
            retain_k: 5,
        };
        let s = Summarizer::mock(ratio);
        let mut blocks: Vec<MemoryBlock> = Vec::new();
        for i in 0..plan.len() {
            let input = build_compression_input(t, &plan, i, blocks.last().cloned(), 5).unwrap();
            blocks.push(s.summarize(&input).unwrap());
        }
        stitch(t, &plan, &blocks, 5, &TokenBudget::default()).unwrap()
    }

    fn long_obs(i: u32) -> String {
        format!("listing {i}\n{}", "src/module.py ok\n".repeat(60))
    }

    #[test]
    fn clean_record_is_accepted() {
        let r = retrofit(&base(90, long_obs), &[20, 40, 60, 80], 0.3);
        assert!(r.fold_log.iter().all(|f| f.ratio() <= 1.0 / 3.0));
        assert_eq!(gate_trajectory(&r, &GateConfig::default()), Verdict::Accept);
    }

    #[test]
    fn trailing_errors_reject() {
        let t = base(30, |i| if i > 24 { "Error: boom".into() } else { long_obs(i) });
        let r = retrofit(&t, &[], 0.3);
        assert_eq!(
            gate_trajectory(&r, &GateConfig::default()),
            Verdict::Reject(vec![Reason::UnrecoverableError])
        );
    }

    #[test]
    fn weak_compression_rejects() {
        let r = retrofit(&base(30, long_obs), &[20], 0.8);
        let f = r.fold_log[0];
        assert!(f.ratio() > 0.5, "{f:?}");
        assert_eq!(
            gate_trajectory(&r, &GateConfig::default()).reasons(),
            &[Reason::MinimalInformationGain]
        );
    }

    #[test]
    fn reasons_accumulate() {
        let t = base(30, |i| if i > 20 { "FAILED".into() } else { long_obs(i) });
        let mut r = retrofit(&t, &[], 0.3);
        r.trajectory.terminal_status = TerminalStatus::BudgetExhausted;
        assert_eq!(
            gate_trajectory(&r, &GateConfig::default()).reasons(),
            &[Reason::TerminalStatus, Reason::UnrecoverableError]
        );
    }

    #[test]
    fn dense_folds_reject() {
        let r = retrofit(&base(60, long_obs), &[12, 19, 26], 0.3);
        assert!(gate_trajectory(&r, &GateConfig::default())
            .reasons()
            .contains(&Reason::ExcessiveFoldFrequency));
    }

    #[test]
    fn dropped_coverage_and_false_success_reject() {
        let t = base(30, |i| if i < 10 { "error: nope".into() } else { long_obs(i) });
        let mut r = retrofit(&t, &[20], 0.3);
        let mut block = MemoryBlock::parse(&r.trajectory.steps[20].observation).unwrap();
        block.covered_step_ids.truncate(10);
        block.strategies.push(Strategy {
            attempt: "r3 recovered: run 3".into(),
            outcome: Outcome::Succeeded,
            rounds: vec![3],
        });
        r.trajectory.steps[20].observation = block.serialize();
        let reasons = gate_trajectory(&r, &GateConfig::default());
        assert!(reasons.reasons().contains(&Reason::SemanticDrift));
        assert!(reasons.reasons().contains(&Reason::StateInconsistency));
    }

    #[test]
    fn stats_of_small_corpora() {
        let mut r = retrofit(&base(10, long_obs), &[], 0.3);
        r.fold_log = vec![FoldRecord {
            round: 6,
            base_round: 5,
            block_tokens: TokenCount(300),
            compressible_tokens: TokenCount(1000),
        }];
        let s = corpus_stats(std::slice::from_ref(&r)).unwrap();
        assert!((s.ratio_avg - 0.30).abs() < 1e-12);
        assert_eq!((s.steps.avg, s.steps.median, s.steps.max), (10.0, 10.0, 10));

        let mut a = r.clone();
        a.fold_log = vec![r.fold_log[0]; 4];
        let mut b = r.clone();
        b.fold_log = vec![r.fold_log[0]; 6];
        let s = corpus_stats(&[a, b]).unwrap();
        assert_eq!((s.folds.avg, s.folds.median, s.folds.max), (5.0, 5.0, 6));
        assert!(corpus_stats(&[]).is_err());
    }

    #[test]
    fn table_lists_every_row() {
        let r = retrofit(&base(40, long_obs), &[20], 0.3);
        let s = corpus_stats(&[r]).unwrap();
        let table = s.table();
        assert_eq!(table.lines().count(), 13);
        assert!(table.contains(&format!("{:.2}", s.ratio_avg * 100.0)));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        let bad = GateConfig {
            drift_coverage_min: 1.5,
            ..GateConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
