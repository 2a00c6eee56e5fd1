//! The live context `(Q, M, I_k)`: fixed task segment, one replaceable
//! long-term memory block, and the verbatim working steps.
//!
//! # Render format `v1`
//!
//! ```text
//! <system>\n{system_prompt}\n</system>\n<user>\n{user_objective}\n</user>\n
//! <step tool="context">\n<action>\ncontext\n</action>\n<observation>\n{memory block}\n</observation>\n</step>\n
//! <step round="{index}" tool="{tool}">\n<thought>\n{thought}\n</thought>\n<action>\n{raw_text}\n</action>\n<observation>\n{observation}\n</observation>\n</step>\n
//! ```
//!
//! The memory line is present only after the first fold; one working step
//! line follows per retained step, oldest first. Token counts are
//! `ceil(bytes / 4)` of the whole text, tracked incrementally by byte length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBlock;
use crate::tokens::TokenCount;
use crate::trajectory::Step;

pub const RENDER_FORMAT: &str = "v1";
pub const DEFAULT_RETAIN_K: usize = 5;

const MEMORY_OPEN: &str = "<step tool=\"context\">\n<action>\ncontext\n</action>\n<observation>\n";
const MEMORY_CLOSE: &str = "\n</observation>\n</step>\n";

const STEP_ROUND: &str = "<step round=\"";
const STEP_TOOL: &str = "\" tool=\"";
const STEP_THOUGHT: &str = "\">\n<thought>\n";
const STEP_ACTION: &str = "\n</thought>\n<action>\n";
const STEP_OBSERVATION: &str = "\n</action>\n<observation>\n";
const STEP_CLOSE: &str = "\n</observation>\n</step>\n";

/// Non-compressible task semantics: system prompt and user objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedSegment {
    pub system_prompt: String,
    pub user_objective: String,
}

impl FixedSegment {
    pub fn new(system_prompt: impl Into<String>, user_objective: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_objective: user_objective.into(),
        }
    }

    pub fn render_into(&self, out: &mut String) {
        let _ = write!(
            out,
            "<system>\n{}\n</system>\n<user>\n{}\n</user>\n",
            self.system_prompt, self.user_objective
        );
    }

    pub fn render_len(&self) -> usize {
        "<system>\n\n</system>\n<user>\n\n</user>\n".len()
            + self.system_prompt.len()
            + self.user_objective.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemorySegment {
    block: Option<MemoryBlock>,
    fold_count: u32,
    last_fold_round: Option<u32>,
}

impl MemorySegment {
    pub fn block(&self) -> Option<&MemoryBlock> {
        self.block.as_ref()
    }

    pub fn fold_count(&self) -> u32 {
        self.fold_count
    }

    pub fn last_fold_round(&self) -> Option<u32> {
        self.last_fold_round
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkingMemory {
    steps: Vec<Step>,
    retain_k: usize,
}

impl WorkingMemory {
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn retain_k(&self) -> usize {
        self.retain_k
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Rendered context text with its token estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub tokens: TokenCount,
}

/// The context at round `t`. Mutating operations validate their
/// preconditions before touching any state, so a failed call leaves the
/// workspace unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextState {
    fixed: FixedSegment,
    memory: MemorySegment,
    working: WorkingMemory,
    round: u32,
    fixed_bytes: usize,
    memory_bytes: usize,
    working_bytes: usize,
}

impl ContextState {
    /// `C(1) = (Q, {}, {})`.
    pub fn new(system_prompt: impl Into<String>, user_objective: impl Into<String>, retain_k: usize) -> Result<Self> {
        Self::from_fixed(FixedSegment::new(system_prompt, user_objective), retain_k)
    }

    pub fn from_fixed(fixed: FixedSegment, retain_k: usize) -> Result<Self> {
        if retain_k == 0 {
            return Err(Error::Config("retain_k must be at least 1".into()));
        }
        let fixed_bytes = fixed.render_len();
        Ok(Self {
            fixed,
            memory: MemorySegment::default(),
            working: WorkingMemory {
                steps: Vec::new(),
                retain_k,
            },
            round: 1,
            fixed_bytes,
            memory_bytes: 0,
            working_bytes: 0,
        })
    }

    pub fn fixed(&self) -> &FixedSegment {
        &self.fixed
    }

    pub fn memory(&self) -> &MemorySegment {
        &self.memory
    }

    pub fn working(&self) -> &WorkingMemory {
        &self.working
    }

    /// Index the next step must carry.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn retain_k(&self) -> usize {
        self.working.retain_k
    }

    pub fn append_step(&mut self, step: Step) -> Result<()> {
        if step.index != self.round {
            return Err(Error::Sequencing {
                expected: self.round,
                got: step.index,
            });
        }
        self.working_bytes += step_render_len(&step);
        self.working.steps.push(step);
        self.round += 1;
        Ok(())
    }

    /// Replaces the memory block and keeps only the last `retain_k` working
    /// steps. `block` must cover exactly the prior block's rounds plus the
    /// steps being evicted.
    pub fn fold(&mut self, block: MemoryBlock) -> Result<()> {
        let k = self.working.retain_k;
        let n = self.working.steps.len();
        if n <= k {
            return Err(Error::FoldRejected {
                working: n,
                retain_k: k,
            });
        }
        let evicted = &self.working.steps[..n - k];
        let mut expected: Vec<u32> = self
            .memory
            .block
            .as_ref()
            .map(|b| b.covered_step_ids.clone())
            .unwrap_or_default();
        expected.extend(evicted.iter().map(Step::source_id));
        if block.covered_step_ids != expected {
            return Err(Error::Consistency(format!(
                "memory block covers {} rounds, expected {} (prior block plus evicted steps)",
                block.covered_step_ids.len(),
                expected.len()
            )));
        }
        let range = (expected[0], expected[expected.len() - 1]);
        if block.source_range != range {
            return Err(Error::Consistency(format!(
                "memory block source_range {:?} does not match evicted range {:?}",
                block.source_range, range
            )));
        }

        let evicted_bytes: usize = evicted.iter().map(step_render_len).sum();
        self.working.steps.drain(..n - k);
        self.working_bytes -= evicted_bytes;
        self.memory_bytes = memory_render_len(&block);
        self.memory.block = Some(block);
        self.memory.fold_count += 1;
        self.memory.last_fold_round = Some(self.round);
        Ok(())
    }

    /// Applies a `context` step from a trajectory: parses its observation as
    /// a memory block, folds, and advances the round.
    pub fn apply_fold_step(&mut self, step: &Step) -> Result<()> {
        if !step.is_fold() {
            return Err(Error::Consistency(format!("step {} is not a context fold", step.index)));
        }
        if step.index != self.round {
            return Err(Error::Sequencing {
                expected: self.round,
                got: step.index,
            });
        }
        let block = MemoryBlock::parse(&step.observation).map_err(|e| Error::FoldParse {
            round: step.index,
            message: e.to_string(),
        })?;
        self.fold(block)?;
        self.round += 1;
        Ok(())
    }

    /// Appends an environment step or applies a fold step.
    pub fn apply(&mut self, step: &Step) -> Result<()> {
        if step.is_fold() {
            self.apply_fold_step(step)
        } else {
            self.append_step(step.clone())
        }
    }

    pub fn rendered_len(&self) -> usize {
        self.fixed_bytes + self.memory_bytes + self.working_bytes
    }

    pub fn rendered_tokens(&self) -> TokenCount {
        TokenCount::from_byte_len(self.rendered_len())
    }

    /// Token count the context would have after appending `step`.
    pub fn tokens_with(&self, step: &Step) -> TokenCount {
        TokenCount::from_byte_len(self.rendered_len() + step_render_len(step))
    }

    pub fn render(&self) -> Rendered {
        let mut text = String::with_capacity(self.rendered_len());
        self.fixed.render_into(&mut text);
        if let Some(block) = &self.memory.block {
            text.push_str(MEMORY_OPEN);
            text.push_str(&block.serialize());
            text.push_str(MEMORY_CLOSE);
        }
        for step in &self.working.steps {
            render_step(&mut text, step);
        }
        let tokens = crate::tokens::count_tokens(&text);
        Rendered { text, tokens }
    }
}

pub fn init_workspace(system_prompt: &str, user_objective: &str, retain_k: usize) -> Result<ContextState> {
    ContextState::new(system_prompt, user_objective, retain_k)
}

pub fn render_step(out: &mut String, step: &Step) {
    out.push_str(STEP_ROUND);
    let _ = write!(out, "{}", step.index);
    out.push_str(STEP_TOOL);
    out.push_str(step.action.tool_name.as_str());
    out.push_str(STEP_THOUGHT);
    out.push_str(&step.thought);
    out.push_str(STEP_ACTION);
    out.push_str(&step.action.raw_text);
    out.push_str(STEP_OBSERVATION);
    out.push_str(&step.observation);
    out.push_str(STEP_CLOSE);
}

/// Byte length of `render_step` output.
pub fn step_render_len(step: &Step) -> usize {
    STEP_ROUND.len()
        + decimal_len(step.index)
        + STEP_TOOL.len()
        + step.action.tool_name.as_str().len()
        + STEP_THOUGHT.len()
        + step.thought.len()
        + STEP_ACTION.len()
        + step.action.raw_text.len()
        + STEP_OBSERVATION.len()
        + step.observation.len()
        + STEP_CLOSE.len()
}

pub fn memory_render_len(block: &MemoryBlock) -> usize {
    MEMORY_OPEN.len() + block.serialize().len() + MEMORY_CLOSE.len()
}

fn decimal_len(mut n: u32) -> usize {
    let mut len = 1;
    while n >= 10 {
        n /= 10;
        len += 1;
    }
    len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Summarizer;
    use crate::planner::CompressionInput;
    use crate::tokens::count_tokens;
    use crate::trajectory::ToolAction;
    use proptest::prelude::*;

    fn step(i: u32) -> Step {
        Step::new(
            i,
            format!("THOUGHT-MARKER-{i} inspect things"),
            ToolAction::new("execute_bash", format!("grep -n foo src/mod_{i}.py")),
            format!("src/mod_{i}.py:{i}: def foo():\n    return {i}"),
        )
    }

    fn filled(n: u32, k: usize) -> ContextState {
        let mut s = ContextState::new("sys", "fix bug", k).unwrap();
        for i in 1..=n {
            s.append_step(step(i)).unwrap();
        }
        s
    }

    fn fold_live(state: &mut ContextState) -> MemoryBlock {
        let input = CompressionInput::from_workspace(state).unwrap();
        let block = Summarizer::mock(0.3).summarize(&input).unwrap();
        state.fold(block.clone()).unwrap();
        block
    }

    #[test]
    fn init_is_q_only() {
        let s = ContextState::new("sys", "fix bug", 5).unwrap();
        assert_eq!(s.fixed(), &FixedSegment::new("sys", "fix bug"));
        assert!(s.memory().block().is_none());
        assert_eq!(s.memory().fold_count(), 0);
        assert!(s.working().is_empty());
        assert_eq!(s.round(), 1);
        let r = s.render();
        assert_eq!(r.text, "<system>\nsys\n</system>\n<user>\nfix bug\n</user>\n");
        assert_eq!(r.tokens, count_tokens(&r.text));
        assert!(matches!(ContextState::new("s", "u", 0), Err(Error::Config(_))));
    }

    #[test]
    fn append_grows_between_folds() {
        let mut s = ContextState::new("sys", "fix bug", 5).unwrap();
        s.append_step(step(1)).unwrap();
        assert_eq!(s.working().len(), 1);
        assert_eq!(s.round(), 2);
        let s = filled(10, 5);
        assert_eq!(s.working().len(), 10);

        let mut s = filled(2, 5);
        let before = s.clone();
        assert!(matches!(s.append_step(step(5)), Err(Error::Sequencing { expected: 3, got: 5 })));
        assert_eq!(s, before);
    }

    #[test]
    fn fold_keeps_last_k() {
        let mut s = filled(12, 5);
        let round = s.round();
        fold_live(&mut s);
        let kept: Vec<u32> = s.working().steps().iter().map(|s| s.index).collect();
        assert_eq!(kept, vec![8, 9, 10, 11, 12]);
        assert_eq!(s.memory().fold_count(), 1);
        assert_eq!(s.memory().last_fold_round(), Some(round));
        assert_eq!(s.round(), round);
        assert_eq!(s.memory().block().unwrap().source_range, (1, 7));
    }

    #[test]
    fn fold_rejected_without_compressible_prefix() {
        let mut s = filled(5, 5);
        let input_block = {
            let mut bigger = filled(6, 5);
            fold_live(&mut bigger)
        };
        let before = s.clone();
        assert!(matches!(s.fold(input_block), Err(Error::FoldRejected { working: 5, retain_k: 5 })));
        assert_eq!(s, before);
    }

    #[test]
    fn fold_rejects_mismatched_coverage() {
        let mut a = filled(12, 5);
        let block = fold_live(&mut a.clone());
        // a block for 12 steps does not fit a workspace holding 13
        a.append_step(step(13)).unwrap();
        let before = a.clone();
        assert!(matches!(a.fold(block), Err(Error::Consistency(_))));
        assert_eq!(a, before);
    }

    // Scripted 30-step replay, folds after rounds 12 and 25 with k = 5.
    // By hand: first fold evicts 1..=7 (keeps 8..=12); second fold sees
    // working 8..=25, evicts 8..=20 and must cover 1..=20.
    #[test]
    fn successive_folds_chain_ranges() {
        let mut s = ContextState::new("sys", "fix bug", 5).unwrap();
        let mut blocks = Vec::new();
        for i in 1..=30 {
            s.append_step(step(i)).unwrap();
            if i == 12 || i == 25 {
                blocks.push(fold_live(&mut s));
            }
        }
        assert_eq!(s.memory().fold_count(), 2);
        assert_eq!(blocks[0].source_range, (1, 7));
        assert_eq!(blocks[1].source_range, (1, 20));
        assert_eq!(blocks[1].covered_step_ids, (1..=20).collect::<Vec<_>>());
        assert_eq!(blocks[0].source_range.1 + 1, 8);
        let kept: Vec<u32> = s.working().steps().iter().map(|s| s.index).collect();
        assert_eq!(kept, (21..=30).collect::<Vec<_>>());
    }

    #[test]
    fn post_fold_render_hides_evicted_thoughts() {
        let mut s = filled(20, 5);
        fold_live(&mut s);
        let text = s.render().text;
        for i in 1..=15 {
            assert!(!text.contains(&format!("THOUGHT-MARKER-{i} ")), "round {i} thought leaked");
        }
        for i in 16..=20 {
            assert!(text.contains(&format!("THOUGHT-MARKER-{i} ")));
        }
    }

    #[test]
    fn fixed_segment_bytes_never_change() {
        let mut s = ContextState::new("You are a careful engineer.", "Fix the parser.", 3).unwrap();
        let prefix = s.render().text;
        for i in 1..=40 {
            s.append_step(step(i)).unwrap();
            if i % 10 == 0 {
                fold_live(&mut s);
            }
            assert!(s.render().text.starts_with(&prefix));
        }
    }

    #[test]
    fn retained_steps_render_verbatim_after_fold() {
        let mut s = filled(18, 4);
        let mut expected = String::new();
        for st in &s.working().steps()[14..] {
            render_step(&mut expected, st);
        }
        fold_live(&mut s);
        assert!(s.render().text.ends_with(&expected));
    }

    #[test]
    fn apply_fold_step_parses_observation() {
        let mut s = filled(9, 3);
        let input = CompressionInput::from_workspace(&s).unwrap();
        let block = Summarizer::mock(0.3).summarize(&input).unwrap();
        let mut fold = Step::new(10, "condense", ToolAction::context("fold"), block.serialize());
        s.apply_fold_step(&fold).unwrap();
        assert_eq!(s.round(), 11);
        assert_eq!(s.working().len(), 3);

        let mut t = filled(9, 3);
        fold.observation = "not a block".into();
        assert!(matches!(t.apply_fold_step(&fold), Err(Error::FoldParse { round: 10, .. })));
    }

    proptest! {
        #[test]
        fn step_len_matches_render(i in 1u32..100_000, th in ".{0,40}", a in ".{0,40}", o in ".{0,80}") {
            let st = Step::new(i, th, ToolAction::new("execute_bash", a), o);
            let mut out = String::new();
            render_step(&mut out, &st);
            prop_assert_eq!(out.len(), step_render_len(&st));
        }

        #[test]
        fn incremental_tokens_match_render(n in 1u32..40, k in 1usize..8, fold_every in 3u32..15) {
            let mut s = ContextState::new("sys", "goal", k).unwrap();
            for i in 1..=n {
                s.append_step(step(i)).unwrap();
                if i % fold_every == 0 && s.working().len() > k {
                    fold_live(&mut s);
                }
                let r = s.render();
                prop_assert_eq!(r.text.len(), s.rendered_len());
                prop_assert_eq!(r.tokens, s.rendered_tokens());
            }
        }
    }
}
