//! Deterministic extractive summarizer.
//!
//! Each compressible step contributes its round id, the first line of its
//! action and a succeeded/failed tag. Observations are quoted as key facts so
//! that truncation, not extraction, decides the final size.

use super::{clip, MemoryBlock, Outcome, Strategy, SummarizerKind, ENTRY_CAP};
use crate::patterns::PatternSet;
use crate::planner::CompressionInput;
use crate::trajectory::{Step, ToolName};

const ACTION_CAP: usize = 120;
const CONSTRAINTS_PER_STEP: usize = 2;

pub(super) fn extract(input: &CompressionInput, failure: &PatternSet, constraint: &PatternSet) -> MemoryBlock {
    let steps = &input.compressible;
    let covered: Vec<u32> = steps.iter().map(Step::source_id).collect();
    let mut block = MemoryBlock::empty(covered, input.compressible_tokens(), SummarizerKind::ExtractiveMock);

    let failed: Vec<bool> = steps.iter().map(|s| failure.is_match(&s.observation)).collect();
    let mut i = 0;
    while i < steps.len() {
        if failed[i] {
            let start = i;
            while i < steps.len() && failed[i] {
                i += 1;
            }
            let run = &steps[start..i];
            let first = &run[0];
            let rounds: Vec<u32> = run.iter().map(Step::source_id).collect();
            let recovered_by = steps.get(i);
            let outcome = match recovered_by {
                Some(next) if next.action.tool_name != first.action.tool_name => Outcome::Abandoned,
                _ => Outcome::Failed,
            };
            let span = if rounds.len() == 1 {
                format!("r{}", rounds[0])
            } else {
                format!("r{}-r{}", rounds[0], rounds[rounds.len() - 1])
            };
            block.strategies.push(Strategy {
                attempt: entry(&format!("{span} failed x{}: ", run.len()), first.action.first_line()),
                outcome,
                rounds,
            });
            for s in run {
                push_constraints(&mut block.constraints, s, constraint);
                block.key_facts.push(key_fact(s));
            }
            if let Some(next) = recovered_by {
                if outcome == Outcome::Failed {
                    block.strategies.push(Strategy {
                        attempt: entry(&format!("r{} recovered: ", next.source_id()), next.action.first_line()),
                        outcome: Outcome::Succeeded,
                        rounds: vec![next.source_id()],
                    });
                }
            }
            continue;
        }

        let s = &steps[i];
        let line = entry(&format!("r{} ok: ", s.source_id()), s.action.first_line());
        if s.action.tool_name == ToolName::StrReplaceEditor {
            block.env_changes.push(line);
        } else {
            block.completed_subtasks.push(line);
        }
        push_constraints(&mut block.constraints, s, constraint);
        block.key_facts.push(key_fact(s));
        i += 1;
    }
    block
}

fn entry(prefix: &str, action_line: &str) -> String {
    let text = format!("{prefix}{}", clip(action_line, ACTION_CAP));
    clip(&text, ENTRY_CAP).to_string()
}

fn key_fact(step: &Step) -> String {
    format!("r{}: {}", step.source_id(), step.observation.trim())
}

fn push_constraints(out: &mut Vec<String>, step: &Step, patterns: &PatternSet) {
    let mut taken = 0;
    for line in step.observation.lines() {
        if taken == CONSTRAINTS_PER_STEP {
            break;
        }
        let line = line.trim();
        if !line.is_empty() && patterns.is_match(line) {
            let c = clip(line, ENTRY_CAP).to_string();
            if !out.contains(&c) {
                out.push(c);
            }
            taken += 1;
        }
    }
}
