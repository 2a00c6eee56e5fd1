//! Structured long-term memory blocks and the summarizers that produce them.
//!
//! A [`MemoryBlock`] is serialized as a sentinel line followed by one line of
//! JSON. That text is exactly the observation of the `context` step that
//! produced it, and `token_size` is always the estimate of that text.

mod chat;
mod mock;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use chat::{ChatClient, ENV_MODEL_ENDPOINT, ENV_MODEL_KEY};

use crate::error::{Error, Result};
use crate::patterns::PatternSet;
use crate::planner::CompressionInput;
use crate::tokens::{count_tokens, TokenCount};

/// First line of every serialized memory block.
pub const MEMORY_SENTINEL: &str = "[[ctxfold.memory.v1]]";

/// Non-key-fact entries are capped at this many bytes.
pub(crate) const ENTRY_CAP: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub attempt: String,
    pub outcome: Outcome,
    /// Source rounds the attempt spans.
    #[serde(default)]
    pub rounds: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarizerKind {
    #[default]
    ExtractiveMock,
    ChatModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBlock {
    pub source_range: (u32, u32),
    #[serde(with = "id_ranges")]
    pub covered_step_ids: Vec<u32>,
    /// Size of what this block condenses: compressible steps plus any prior block.
    pub input_tokens: TokenCount,
    #[serde(default)]
    pub generator: SummarizerKind,
    pub completed_subtasks: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub env_changes: Vec<String>,
    pub constraints: Vec<String>,
    pub key_facts: Vec<String>,
    #[serde(skip)]
    pub token_size: TokenCount,
}

impl MemoryBlock {
    /// Empty block covering `covered`; sections are filled by the caller.
    pub(crate) fn empty(covered: Vec<u32>, input_tokens: TokenCount, generator: SummarizerKind) -> Self {
        let source_range = (
            covered.first().copied().unwrap_or(0),
            covered.last().copied().unwrap_or(0),
        );
        Self {
            source_range,
            covered_step_ids: covered,
            input_tokens,
            generator,
            completed_subtasks: Vec::new(),
            strategies: Vec::new(),
            env_changes: Vec::new(),
            constraints: Vec::new(),
            key_facts: Vec::new(),
            token_size: TokenCount::ZERO,
        }
    }

    pub fn serialize(&self) -> String {
        let json = serde_json::to_string(self).expect("memory block serializes");
        format!("{MEMORY_SENTINEL}\n{json}")
    }

    /// Parses the observation text of a fold step.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text
            .strip_prefix(MEMORY_SENTINEL)
            .and_then(|rest| rest.strip_prefix('\n'))
            .ok_or_else(|| Error::Consistency("missing memory sentinel".into()))?;
        let mut block: MemoryBlock = serde_json::from_str(body)?;
        block.token_size = count_tokens(text);
        Ok(block)
    }

    pub fn is_empty(&self) -> bool {
        self.entry_count() == 0
    }

    pub fn entry_count(&self) -> usize {
        self.completed_subtasks.len()
            + self.strategies.len()
            + self.env_changes.len()
            + self.constraints.len()
            + self.key_facts.len()
    }

    pub(crate) fn finalize(mut self) -> Self {
        self.token_size = count_tokens(&self.serialize());
        self
    }

    /// Drops entries until the serialized block fits in `limit` tokens.
    ///
    /// Sections are emptied in priority order (key facts first, completed
    /// subtasks last), oldest entries first. The final key fact may be cut
    /// short instead of dropped. At least one entry always survives.
    pub(crate) fn fit_to(&mut self, limit: TokenCount) {
        let limit_bytes = limit.0 as usize * crate::tokens::BYTES_PER_TOKEN;
        let mut len = MemoryBlock::serialize(self).len();
        if len <= limit_bytes {
            return;
        }

        // key facts: drop from the front, shorten the last one dropped if that
        // lands closer to the limit
        while len > limit_bytes && !self.key_facts.is_empty() && self.entry_count() > 1 {
            let cost = json_len(&self.key_facts[0]) + usize::from(self.key_facts.len() > 1);
            if len - cost < limit_bytes {
                let excess = len - limit_bytes;
                if let Some(shorter) = shorten_to_save(&self.key_facts[0], excess) {
                    let saved = json_len(&self.key_facts[0]) - json_len(&shorter);
                    self.key_facts[0] = shorter;
                    len -= saved;
                    break;
                }
            }
            self.key_facts.remove(0);
            len -= cost;
        }

        macro_rules! drain_front {
            ($field:expr) => {
                while len > limit_bytes && !$field.is_empty() && self.entry_count() > 1 {
                    let cost = json_len(&$field[0]) + usize::from($field.len() > 1);
                    $field.remove(0);
                    len -= cost;
                }
            };
        }
        drain_front!(self.constraints);
        drain_front!(self.env_changes);
        drain_front!(self.strategies);
        drain_front!(self.completed_subtasks);
        debug_assert_eq!(len, MemoryBlock::serialize(self).len());
    }
}

fn json_len<T: Serialize>(v: &T) -> usize {
    serde_json::to_string(v).map(|s| s.len()).unwrap_or(0)
}

/// A prefix of `text` whose JSON encoding is at least `excess` bytes shorter,
/// or `None` when nothing useful would remain.
fn shorten_to_save(text: &str, excess: usize) -> Option<String> {
    let full = json_len(&text);
    let mut cut = text.len().saturating_sub(excess);
    loop {
        while cut > 0 && !text.is_char_boundary(cut) {
            cut -= 1;
        }
        if cut < 16 {
            return None;
        }
        let candidate = &text[..cut];
        if full - json_len(&candidate) >= excess {
            return Some(candidate.to_string());
        }
        cut -= 1;
    }
}

/// Truncates at a char boundary to at most `cap` bytes.
pub(crate) fn clip(text: &str, cap: usize) -> &str {
    if text.len() <= cap {
        return text;
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizerSpec {
    #[serde(default)]
    pub kind: SummarizerKind,
    #[serde(default = "default_target_ratio")]
    pub target_ratio: f64,
    #[serde(default)]
    pub model_endpoint: Option<String>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "PatternSet::constraint_defaults")]
    pub constraint_patterns: PatternSet,
}

fn default_target_ratio() -> f64 {
    0.30
}
fn default_model_name() -> String {
    "swe-compressor".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_in_flight() -> usize {
    4
}

impl Default for SummarizerSpec {
    fn default() -> Self {
        Self {
            kind: SummarizerKind::ExtractiveMock,
            target_ratio: default_target_ratio(),
            model_endpoint: None,
            model_name: default_model_name(),
            request_timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            constraint_patterns: PatternSet::constraint_defaults(),
        }
    }
}

impl SummarizerSpec {
    pub fn with_target_ratio(mut self, ratio: f64) -> Self {
        self.target_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::Config(format!(
                "target_ratio {} not in (0, 1)",
                self.target_ratio
            )));
        }
        if self.kind == SummarizerKind::ChatModel && self.model_endpoint.is_none() {
            return Err(Error::Config("chat_model summarizer requires model_endpoint".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// A configured summarizer: the deterministic extractive mock or a chat
/// model client. Safe to share across worker threads.
pub struct Summarizer {
    spec: SummarizerSpec,
    failure: PatternSet,
    chat: Option<ChatClient>,
}

impl Summarizer {
    pub fn new(spec: SummarizerSpec, failure: PatternSet) -> Result<Self> {
        spec.validate()?;
        let chat = match spec.kind {
            SummarizerKind::ChatModel => Some(ChatClient::from_spec(&spec)?),
            SummarizerKind::ExtractiveMock => None,
        };
        Ok(Self {
            spec,
            failure,
            chat,
        })
    }

    pub fn mock(target_ratio: f64) -> Self {
        Self::new(
            SummarizerSpec::default().with_target_ratio(target_ratio),
            PatternSet::failure_defaults(),
        )
        .expect("valid mock spec")
    }

    pub fn spec(&self) -> &SummarizerSpec {
        &self.spec
    }

    pub fn failure_patterns(&self) -> &PatternSet {
        &self.failure
    }

    /// Produces the memory block for one compression input, folding the
    /// prior block (if any) into the result.
    pub fn summarize(&self, input: &CompressionInput) -> Result<MemoryBlock> {
        if input.compressible.is_empty() {
            return Err(Error::Planning("compressible segment is empty".into()));
        }
        match &self.chat {
            Some(client) => client.summarize(input, &self.spec),
            None => {
                let fresh = mock::extract(input, &self.failure, &self.spec.constraint_patterns);
                match &input.prior_block {
                    Some(prior) => merge_prior(prior, fresh, self.spec.target_ratio),
                    None => {
                        let mut block = fresh;
                        block.fit_to(block.input_tokens.scale(self.spec.target_ratio));
                        Ok(block.finalize())
                    }
                }
            }
        }
    }
}

/// Summarizes with the extractive mock and default patterns.
pub fn summarize(input: &CompressionInput, spec: &SummarizerSpec) -> Result<MemoryBlock> {
    Summarizer::new(spec.clone(), PatternSet::failure_defaults())?.summarize(input)
}

/// Consolidates a prior block with a fresh one covering later rounds.
///
/// Lists are concatenated prior-first with exact duplicates removed; the
/// result is truncated to `target_ratio` of what it condenses, which is the
/// prior block as rendered plus the fresh block's compressible input.
pub fn merge_prior(prior: &MemoryBlock, fresh: MemoryBlock, target_ratio: f64) -> Result<MemoryBlock> {
    let prior_end = prior.covered_step_ids.last().copied().unwrap_or(prior.source_range.1);
    let fresh_start = fresh.covered_step_ids.first().copied().unwrap_or(fresh.source_range.0);
    if prior.source_range.1 >= fresh.source_range.0 || prior_end >= fresh_start {
        return Err(Error::Consistency(format!(
            "prior block {:?} overlaps fresh block {:?}",
            prior.source_range, fresh.source_range
        )));
    }

    let mut covered = prior.covered_step_ids.clone();
    covered.extend_from_slice(&fresh.covered_step_ids);
    let prior_size = count_tokens(&prior.serialize());
    let input_tokens = prior_size + fresh.input_tokens;

    let mut merged = MemoryBlock::empty(covered, input_tokens, fresh.generator);
    merged.source_range = (prior.source_range.0, fresh.source_range.1);
    merged.completed_subtasks = dedup_concat(&prior.completed_subtasks, fresh.completed_subtasks);
    merged.strategies = dedup_concat(&prior.strategies, fresh.strategies);
    merged.env_changes = dedup_concat(&prior.env_changes, fresh.env_changes);
    merged.constraints = dedup_concat(&prior.constraints, fresh.constraints);
    merged.key_facts = dedup_concat(&prior.key_facts, fresh.key_facts);
    merged.fit_to(input_tokens.scale(target_ratio));
    Ok(merged.finalize())
}

fn dedup_concat<T: Clone + Eq + std::hash::Hash>(prior: &[T], fresh: Vec<T>) -> Vec<T> {
    let mut seen = HashSet::new();
    prior
        .iter()
        .cloned()
        .chain(fresh)
        .filter(|item| seen.insert(item.clone()))
        .collect()
}

/// Serializes a sorted id list as inclusive `[start, end]` runs.
mod id_ranges {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ids: &[u32], s: S) -> Result<S::Ok, S::Error> {
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &id in ids {
            match runs.last_mut() {
                Some(run) if run[1].checked_add(1) == Some(id) => run[1] = id,
                _ => runs.push([id, id]),
            }
        }
        runs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u32>, D::Error> {
        let runs = Vec::<[u32; 2]>::deserialize(d)?;
        let mut ids = Vec::new();
        for [start, end] in runs {
            if end < start {
                return Err(serde::de::Error::custom(format!("bad id run [{start}, {end}]")));
            }
            ids.extend(start..=end);
        }
        Ok(ids)
    }
}
