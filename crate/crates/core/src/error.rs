use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("round {value} out of range 1..={len}")]
    Range { value: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequencing error: expected step index {expected}, got {got}")]
    Sequencing { expected: u32, got: u32 },

    #[error("fold rejected: {working} working steps, nothing to compress beyond retain_k={retain_k}")]
    FoldRejected { working: usize, retain_k: usize },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("provenance error: expected {expected}, found {found}")]
    Provenance {
        expected: &'static str,
        found: &'static str,
    },

    #[error("planning inconsistency: {0}")]
    Planning(String),

    #[error("summarizer unavailable: {0}")]
    SummarizerUnavailable(String),

    #[error("malformed fold step at round {round}: {message}")]
    FoldParse { round: u32, message: String },

    #[error("illegal action: `{tool}` is not allowed under {strategy}")]
    IllegalAction { tool: String, strategy: &'static str },

    #[error("budget overflow: context at round {round} is {tokens} tokens, budget {max}")]
    BudgetOverflow { round: u32, tokens: u64, max: u64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
