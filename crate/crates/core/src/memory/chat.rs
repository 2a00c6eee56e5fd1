//! Chat-model summarizer client.
//!
//! Request: `{model, messages: [{role, content}], temperature: 0.0}` POSTed to
//! the configured endpoint. The first message content of the response
//! (`choices[0].message.content`, or `messages[0].content`) must parse into
//! the five memory sections.

use std::fmt::Write as _;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tracing::warn;

use super::{MemoryBlock, Strategy, SummarizerKind, SummarizerSpec, MEMORY_SENTINEL};
use crate::error::{Error, Result};
use crate::planner::CompressionInput;
use crate::workspace::render_step;

pub const ENV_MODEL_ENDPOINT: &str = "CAT_MODEL_ENDPOINT";
pub const ENV_MODEL_KEY: &str = "CAT_MODEL_KEY";

/// Extra attempts after the first when a response is unusable.
const RETRIES: usize = 2;

const SYSTEM_PROMPT: &str = "You maintain the long-term memory of a software engineering agent. \
Condense the COMPRESSIBLE HISTORY (and the PRIOR MEMORY, if present) into one JSON object with \
exactly these keys:\n\
  completed_subtasks: [string]\n\
  strategies: [{\"attempt\": string, \"outcome\": \"succeeded\"|\"failed\"|\"abandoned\", \"rounds\": [int]}]\n\
  env_changes: [string]\n\
  constraints: [string]\n\
  key_facts: [string]\n\
Keep information that later decisions depend on. The TASK and RECENT STEPS are shown for \
orientation only and stay in context verbatim; do not summarize them. Reply with the JSON \
object only.";

#[derive(Debug, Deserialize)]
struct Sections {
    #[serde(default)]
    completed_subtasks: Vec<String>,
    #[serde(default)]
    strategies: Vec<Strategy>,
    #[serde(default)]
    env_changes: Vec<String>,
    #[serde(default)]
    constraints: Vec<String>,
    #[serde(default)]
    key_facts: Vec<String>,
}

struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct ChatClient {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl ChatClient {
    /// Endpoint from the summarizer settings, falling back to `CAT_MODEL_ENDPOINT`; the
    /// bearer key comes from `CAT_MODEL_KEY`.
    pub fn from_spec(spec: &SummarizerSpec) -> Result<Self> {
        let endpoint = spec
            .model_endpoint
            .clone()
            .or_else(|| std::env::var(ENV_MODEL_ENDPOINT).ok())
            .ok_or_else(|| Error::Config("chat_model summarizer requires model_endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.request_timeout_secs)))
            .build()
            .into();
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_MODEL_KEY).ok(),
            model: spec.model_name.clone(),
            agent,
            in_flight: InFlight {
                cap: spec.max_in_flight,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
        })
    }

    pub fn request_body(&self, input: &CompressionInput) -> Value {
        json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": SYSTEM_PROMPT },
                { "role": "user", "content": build_prompt(input) },
            ],
            "temperature": 0.0,
        })
    }

    pub(super) fn summarize(&self, input: &CompressionInput, spec: &SummarizerSpec) -> Result<MemoryBlock> {
        let body = self.request_body(input);
        let mut last_err = String::new();
        for attempt in 0..=RETRIES {
            match self.call(&body).and_then(|content| parse_sections(&content)) {
                Ok(sections) => return Ok(build_block(input, sections, spec)),
                Err(e) => {
                    warn!(attempt, error = %e, "chat summarizer attempt failed");
                    last_err = e;
                }
            }
        }
        Err(Error::SummarizerUnavailable(format!(
            "{} attempts failed, last: {last_err}",
            RETRIES + 1
        )))
    }

    fn call(&self, body: &Value) -> std::result::Result<String, String> {
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let value: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        first_message_content(&value).ok_or_else(|| "response has no message content".to_string())
    }
}

fn first_message_content(v: &Value) -> Option<String> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/messages/0/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn parse_sections(content: &str) -> std::result::Result<Sections, String> {
    let body = content.trim();
    let body = body.strip_prefix(MEMORY_SENTINEL).unwrap_or(body);
    let start = body.find('{').ok_or("no JSON object in response")?;
    let end = body.rfind('}').ok_or("no JSON object in response")?;
    if end < start {
        return Err("no JSON object in response".into());
    }
    let sections: Sections = serde_json::from_str(&body[start..=end]).map_err(|e| e.to_string())?;
    let total = sections.completed_subtasks.len()
        + sections.strategies.len()
        + sections.env_changes.len()
        + sections.constraints.len()
        + sections.key_facts.len();
    if total == 0 {
        return Err("all memory sections empty".into());
    }
    Ok(sections)
}

fn build_block(input: &CompressionInput, s: Sections, spec: &SummarizerSpec) -> MemoryBlock {
    let prior_tokens = input
        .prior_block
        .as_ref()
        .map(|b| b.token_size)
        .unwrap_or_default();
    let input_tokens = prior_tokens + input.compressible_tokens();
    let mut block = MemoryBlock::empty(input.covered_ids(), input_tokens, SummarizerKind::ChatModel);
    if let Some(prior) = &input.prior_block {
        block.source_range.0 = prior.source_range.0;
    }
    block.completed_subtasks = s.completed_subtasks;
    block.strategies = s.strategies;
    block.env_changes = s.env_changes;
    block.constraints = s.constraints;
    block.key_facts = s.key_facts;
    block.fit_to(input_tokens.scale(spec.target_ratio));
    block.finalize()
}

fn build_prompt(input: &CompressionInput) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "TASK (read-only)\n{}\n{}\n", input.fixed.system_prompt, input.fixed.user_objective);
    if let Some(prior) = &input.prior_block {
        let _ = writeln!(p, "PRIOR MEMORY\n{}\n", prior.serialize());
    }
    p.push_str("COMPRESSIBLE HISTORY\n");
    for step in &input.compressible {
        render_step(&mut p, step);
    }
    p.push_str("\nRECENT STEPS (read-only)\n");
    for step in &input.recent {
        render_step(&mut p, step);
    }
    p
}
