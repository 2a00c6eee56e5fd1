//! Canonical data model for ReAct steps and trajectories.
//!
//! Every other module consumes these types. Observations are kept verbatim;
//! truncation is a rendering concern and never happens here.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a tool. The vocabulary is open so foreign scaffolds can be
/// ingested; the four built-in names get dedicated variants.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ToolName {
    ExecuteBash,
    StrReplaceEditor,
    Submit,
    Context,
    Other(String),
}

impl ToolName {
    pub fn as_str(&self) -> &str {
        match self {
            ToolName::ExecuteBash => "execute_bash",
            ToolName::StrReplaceEditor => "str_replace_editor",
            ToolName::Submit => "submit",
            ToolName::Context => "context",
            ToolName::Other(s) => s,
        }
    }
}

impl From<String> for ToolName {
    fn from(s: String) -> Self {
        match s.as_str() {
            "execute_bash" => ToolName::ExecuteBash,
            "str_replace_editor" => ToolName::StrReplaceEditor,
            "submit" => ToolName::Submit,
            "context" => ToolName::Context,
            _ => ToolName::Other(s),
        }
    }
}

impl From<&str> for ToolName {
    fn from(s: &str) -> Self {
        ToolName::from(s.to_string())
    }
}

impl From<ToolName> for String {
    fn from(t: ToolName) -> Self {
        t.as_str().to_string()
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single tool call as emitted by the policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolAction {
    pub tool_name: ToolName,
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
    /// Verbatim serialized call, as the model produced it.
    pub raw_text: String,
}

impl ToolAction {
    pub fn new(tool_name: impl Into<ToolName>, raw_text: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into(),
            arguments: BTreeMap::new(),
            raw_text: raw_text.into(),
        }
    }

    pub fn with_arg(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.arguments.insert(key.into(), value.into());
        self
    }

    /// A `context` call carrying only a free-text note.
    pub fn context(note: impl Into<String>) -> Self {
        let note = note.into();
        let raw_text = serde_json::json!({ "name": "context", "arguments": { "note": note } })
            .to_string();
        Self::new(ToolName::Context, raw_text).with_arg("note", note)
    }

    pub fn is_context(&self) -> bool {
        self.tool_name == ToolName::Context
    }

    pub fn is_submit(&self) -> bool {
        self.tool_name == ToolName::Submit
    }

    /// First line of the raw call text.
    pub fn first_line(&self) -> &str {
        self.raw_text.lines().next().unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Environment,
    ContextFold,
}

/// One ReAct round: thought, action and the resulting observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based round number.
    pub index: u32,
    pub thought: String,
    pub action: ToolAction,
    pub observation: String,
    pub step_kind: StepKind,
    /// Round of this step in the base trajectory it was stitched from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_index: Option<u32>,
}

impl Step {
    /// An environment step; the kind is derived from the action.
    pub fn new(
        index: u32,
        thought: impl Into<String>,
        action: ToolAction,
        observation: impl Into<String>,
    ) -> Self {
        let step_kind = if action.is_context() {
            StepKind::ContextFold
        } else {
            StepKind::Environment
        };
        Self {
            index,
            thought: thought.into(),
            action,
            observation: observation.into(),
            step_kind,
            base_index: None,
        }
    }

    pub fn is_fold(&self) -> bool {
        self.step_kind == StepKind::ContextFold
    }

    /// Identifier used by memory blocks to reference this step: the base
    /// round when the step was stitched, otherwise its own index.
    pub fn source_id(&self) -> u32 {
        self.base_index.unwrap_or(self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    SubmittedSuccess,
    SubmittedFailure,
    BudgetExhausted,
    ErrorLoop,
    Truncated,
}

impl TerminalStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalStatus::SubmittedSuccess => "submitted_success",
            TerminalStatus::SubmittedFailure => "submitted_failure",
            TerminalStatus::BudgetExhausted => "budget_exhausted",
            TerminalStatus::ErrorLoop => "error_loop",
            TerminalStatus::Truncated => "truncated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Base,
    Retrofitted,
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub task_prompt: String,
    pub system_prompt: String,
    pub steps: Vec<Step>,
    pub terminal_status: TerminalStatus,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn fold_count(&self) -> usize {
        self.steps.iter().filter(|s| s.is_fold()).count()
    }

    pub fn environment_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| !s.is_fold())
    }

    /// Splits steps `1..=upto` into the compressible prefix and the last
    /// `recent_k` steps.
    pub fn slice_history(&self, upto: usize, recent_k: usize) -> Result<(&[Step], &[Step])> {
        slice_history(self, upto, recent_k)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_trajectory(self)
    }
}

/// Which trajectory invariant a [`Violation`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    ContiguousIndex,
    EmptyToolName,
    StepKindMismatch,
    ContextArguments,
    BaseHasFold,
    SubmitNotFinal,
    MultipleSubmits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    /// 1-based position in the step list.
    pub position: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Checks every trajectory invariant and reports each breach; an empty list
/// means the trajectory is well formed.
pub fn validate_trajectory(traj: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |invariant, position, message: String| {
        out.push(Violation {
            invariant,
            position,
            message,
        })
    };

    let submits: Vec<usize> = traj
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.action.is_submit())
        .map(|(i, _)| i + 1)
        .collect();

    for (i, step) in traj.steps.iter().enumerate() {
        let pos = i + 1;
        if step.index as usize != pos {
            push(
                Invariant::ContiguousIndex,
                pos,
                format!("non-contiguous index at position {pos}"),
            );
        }
        if step.action.tool_name.as_str().is_empty() {
            push(
                Invariant::EmptyToolName,
                pos,
                format!("empty tool_name at step {pos}"),
            );
        }
        let is_context = step.action.is_context();
        if is_context != step.is_fold() {
            push(
                Invariant::StepKindMismatch,
                pos,
                format!("step_kind does not match tool {} at step {pos}", step.action.tool_name),
            );
        }
        if is_context && step.action.arguments.keys().any(|k| k != "note") {
            push(
                Invariant::ContextArguments,
                pos,
                format!("context action carries non-note arguments at step {pos}"),
            );
        }
        if traj.provenance == Provenance::Base && step.is_fold() {
            push(
                Invariant::BaseHasFold,
                pos,
                format!("provenance=base forbids context_fold at step {pos}"),
            );
        }
    }

    if submits.len() > 1 {
        push(
            Invariant::MultipleSubmits,
            submits[1],
            format!("{} submit actions, second at step {}", submits.len(), submits[1]),
        );
    }
    if let Some(&first) = submits.first() {
        if first != traj.steps.len() {
            push(
                Invariant::SubmitNotFinal,
                first,
                format!("submit at step {first} is not the final step"),
            );
        }
    }
    out
}

/// Returns `(older, recent)` where `recent` is the last `min(recent_k, upto)`
/// steps with index `<= upto`.
pub fn slice_history(traj: &Trajectory, upto: usize, recent_k: usize) -> Result<(&[Step], &[Step])> {
    if upto == 0 || upto > traj.steps.len() {
        return Err(Error::Range {
            value: upto,
            len: traj.steps.len(),
        });
    }
    let window = &traj.steps[..upto];
    let split = upto - recent_k.min(upto);
    Ok(window.split_at(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(i: u32, tool: &str) -> Step {
        Step::new(i, format!("t{i}"), ToolAction::new(tool, format!("{tool} {i}")), format!("o{i}"))
    }

    fn traj(steps: Vec<Step>, provenance: Provenance) -> Trajectory {
        Trajectory {
            task_id: "t".into(),
            task_prompt: "fix bug".into(),
            system_prompt: "sys".into(),
            steps,
            terminal_status: TerminalStatus::SubmittedSuccess,
            provenance,
        }
    }

    #[test]
    fn well_formed_base_has_no_violations() {
        let t = traj(
            vec![step(1, "execute_bash"), step(2, "str_replace_editor"), step(3, "submit")],
            Provenance::Base,
        );
        assert!(validate_trajectory(&t).is_empty());
    }

    #[test]
    fn base_with_context_step() {
        let mut s2 = step(2, "context");
        s2.action = ToolAction::context("fold");
        s2.step_kind = StepKind::ContextFold;
        let t = traj(vec![step(1, "execute_bash"), s2, step(3, "execute_bash")], Provenance::Base);
        let v = validate_trajectory(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "provenance=base forbids context_fold at step 2");
    }

    #[test]
    fn gap_in_indices() {
        let t = traj(
            vec![step(1, "execute_bash"), step(2, "execute_bash"), step(4, "execute_bash")],
            Provenance::Base,
        );
        let v = validate_trajectory(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "non-contiguous index at position 3");
    }

    #[test]
    fn submit_must_be_last_and_unique() {
        let t = traj(
            vec![step(1, "submit"), step(2, "execute_bash"), step(3, "submit")],
            Provenance::Online,
        );
        let kinds: Vec<_> = validate_trajectory(&t).iter().map(|v| v.invariant).collect();
        assert!(kinds.contains(&Invariant::MultipleSubmits));
        assert!(kinds.contains(&Invariant::SubmitNotFinal));
    }

    #[test]
    fn kind_mismatch_and_context_arguments() {
        let mut s = step(1, "execute_bash");
        s.step_kind = StepKind::ContextFold;
        let mut c = step(2, "context");
        c.action = ToolAction::context("n").with_arg("command", "rm -rf /");
        let t = traj(vec![s, c], Provenance::Online);
        let kinds: Vec<_> = validate_trajectory(&t).iter().map(|v| v.invariant).collect();
        assert_eq!(kinds, vec![Invariant::StepKindMismatch, Invariant::ContextArguments]);
    }

    #[test]
    fn slice_history_examples() {
        let t = traj((1..=10).map(|i| step(i, "execute_bash")).collect(), Provenance::Base);
        let (older, recent) = slice_history(&t, 10, 3).unwrap();
        assert_eq!(older.iter().map(|s| s.index).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
        assert_eq!(recent.iter().map(|s| s.index).collect::<Vec<_>>(), vec![8, 9, 10]);

        let (older, recent) = slice_history(&t, 6, 0).unwrap();
        assert_eq!(older.len(), 6);
        assert!(recent.is_empty());

        let short = traj(vec![step(1, "execute_bash"), step(2, "execute_bash")], Provenance::Base);
        let (older, recent) = slice_history(&short, 2, 5).unwrap();
        assert!(older.is_empty());
        assert_eq!(recent.len(), 2);

        assert!(matches!(slice_history(&t, 0, 1), Err(Error::Range { .. })));
        assert!(matches!(slice_history(&t, 11, 1), Err(Error::Range { .. })));
    }

    #[test]
    fn tool_name_round_trips_through_strings() {
        for name in ["execute_bash", "str_replace_editor", "submit", "context", "browser"] {
            let t = ToolName::from(name);
            assert_eq!(t.as_str(), name);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<ToolName>(&json).unwrap(), t);
        }
    }
}
