//! Case-insensitive regex lists used to classify observations.

use std::fmt;

use regex::RegexSet;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_FAILURE_PATTERNS: &[&str] = &["error", "failed", "traceback", "exception"];
pub const DEFAULT_CONSTRAINT_PATTERNS: &[&str] =
    &[r"\bmust\b", r"\brequired?\b", r"\bdo not\b", r"\bnever\b"];

#[derive(Clone)]
pub struct PatternSet {
    sources: Vec<String>,
    set: RegexSet,
}

impl PatternSet {
    pub fn new<I, S>(patterns: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sources: Vec<String> = patterns.into_iter().map(Into::into).collect();
        let set = regex::RegexSetBuilder::new(&sources)
            .case_insensitive(true)
            .build()
            .map_err(|e| Error::Config(format!("invalid pattern: {e}")))?;
        Ok(Self { sources, set })
    }

    pub fn failure_defaults() -> Self {
        Self::new(DEFAULT_FAILURE_PATTERNS.iter().copied()).expect("default patterns compile")
    }

    pub fn constraint_defaults() -> Self {
        Self::new(DEFAULT_CONSTRAINT_PATTERNS.iter().copied()).expect("default patterns compile")
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.set.is_match(text)
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }
}

impl Default for PatternSet {
    fn default() -> Self {
        Self::failure_defaults()
    }
}

impl PartialEq for PatternSet {
    fn eq(&self, other: &Self) -> bool {
        self.sources == other.sources
    }
}

impl fmt::Debug for PatternSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.sources).finish()
    }
}

impl Serialize for PatternSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.sources.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatternSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let sources = Vec::<String>::deserialize(d)?;
        PatternSet::new(sources).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_defaults_are_case_insensitive() {
        let p = PatternSet::failure_defaults();
        assert!(p.is_match("FAILED: tests"));
        assert!(p.is_match("Traceback (most recent call last)"));
        assert!(p.is_match("ValueError: bad"));
        assert!(!p.is_match("3 passed in 0.2s"));
    }

    #[test]
    fn constraints_match_words() {
        let p = PatternSet::constraint_defaults();
        assert!(p.is_match("Tests must pass before submitting"));
        assert!(p.is_match("do not modify the test files"));
        assert!(!p.is_match("mustard"));
    }

    #[test]
    fn bad_regex_is_config_error() {
        assert!(matches!(PatternSet::new(["("]), Err(Error::Config(_))));
    }
}
