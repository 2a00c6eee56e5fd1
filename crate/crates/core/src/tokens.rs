//! Deterministic token estimation and budget bookkeeping.
//!
//! The estimator is `ceil(utf8_bytes / 4)`. It is the only unit used for
//! budgets, triggers and statistics, so every number in a run is comparable.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Step;

pub const BYTES_PER_TOKEN: usize = 4;
pub const DEFAULT_MAX_CONTEXT: u64 = 65_536;
pub const DEFAULT_SOFT_THRESHOLD: f64 = 0.75;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenCount(pub u64);

impl TokenCount {
    pub const ZERO: TokenCount = TokenCount(0);

    pub fn get(self) -> u64 {
        self.0
    }

    /// Tokens for a text of `len` UTF-8 bytes.
    pub fn from_byte_len(len: usize) -> Self {
        TokenCount(len.div_ceil(BYTES_PER_TOKEN) as u64)
    }

    /// `floor(self * fraction)`, used for thresholds.
    pub fn scale(self, fraction: f64) -> TokenCount {
        TokenCount((self.0 as f64 * fraction).floor() as u64)
    }
}

impl Add for TokenCount {
    type Output = TokenCount;
    fn add(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0 + rhs.0)
    }
}

impl AddAssign for TokenCount {
    fn add_assign(&mut self, rhs: TokenCount) {
        self.0 += rhs.0;
    }
}

impl Sum for TokenCount {
    fn sum<I: Iterator<Item = TokenCount>>(iter: I) -> Self {
        iter.fold(TokenCount::ZERO, Add::add)
    }
}

impl fmt::Display for TokenCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Name of the estimator a run is configured with. Only `bytes4` exists;
/// anything else is rejected when the configuration is loaded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEstimator {
    #[default]
    Bytes4,
}

impl TokenEstimator {
    pub fn count(self, text: &str) -> TokenCount {
        match self {
            TokenEstimator::Bytes4 => count_tokens(text),
        }
    }
}

pub fn count_tokens(text: &str) -> TokenCount {
    TokenCount::from_byte_len(text.len())
}

/// Sum of the estimates of thought, serialized action and observation.
pub fn count_step(step: &Step) -> TokenCount {
    count_tokens(&step.thought) + count_tokens(&step.action.raw_text) + count_tokens(&step.observation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBudget {
    #[serde(default = "default_max_context")]
    pub max_context: TokenCount,
    #[serde(default = "default_soft_threshold")]
    pub soft_threshold_fraction: f64,
}

fn default_max_context() -> TokenCount {
    TokenCount(DEFAULT_MAX_CONTEXT)
}

fn default_soft_threshold() -> f64 {
    DEFAULT_SOFT_THRESHOLD
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            max_context: default_max_context(),
            soft_threshold_fraction: DEFAULT_SOFT_THRESHOLD,
        }
    }
}

impl TokenBudget {
    pub fn new(max_context: u64, soft_threshold_fraction: f64) -> Result<Self> {
        let b = Self {
            max_context: TokenCount(max_context),
            soft_threshold_fraction,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_context.0 == 0 {
            return Err(Error::Config("max_context must be positive".into()));
        }
        if !(self.soft_threshold_fraction > 0.0 && self.soft_threshold_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "soft_threshold_fraction {} not in (0, 1]",
                self.soft_threshold_fraction
            )));
        }
        Ok(())
    }

    pub fn soft_threshold(&self) -> TokenCount {
        self.max_context.scale(self.soft_threshold_fraction)
    }
}
