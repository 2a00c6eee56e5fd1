//! Pipeline configuration, loaded from TOML. Every section is optional and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::memory::SummarizerSpec;
use crate::planner::PlannerConfig;
use crate::runtime::{StrategyConfig, StrategyKind};
use crate::tokens::{TokenBudget, TokenEstimator};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub token_estimator: TokenEstimator,
    /// Worker threads; all cores when unset.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Store the rendered context text of every training row.
    #[serde(default)]
    pub emit_context_text: bool,
    #[serde(default)]
    pub budget: TokenBudget,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub summarizer: SummarizerSpec,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub runtime: RuntimeSettings,
    #[serde(default)]
    pub io: IoPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSettings {
    #[serde(default = "all_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: Vec<usize>,
    #[serde(default = "default_threshold")]
    pub threshold_fraction: f64,
    #[serde(default)]
    pub error_loop_limit: Option<usize>,
}

fn all_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}
fn default_max_rounds() -> Vec<usize> {
    vec![150, 500]
}
fn default_threshold() -> f64 {
    0.75
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            strategies: all_strategies(),
            max_rounds: default_max_rounds(),
            threshold_fraction: default_threshold(),
            error_loop_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoPaths {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.planner.validate()?;
        self.summarizer.validate()?;
        self.gate.validate()?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        if self.runtime.strategies.is_empty() || self.runtime.max_rounds.is_empty() {
            return Err(Error::Config("runtime needs at least one strategy and one max_rounds".into()));
        }
        for s in self.strategies(500) {
            s.validate()?;
        }
        Ok(())
    }

    /// Strategy settings for the runtime, one per configured kind.
    pub fn strategies(&self, max_rounds: usize) -> Vec<StrategyConfig> {
        self.runtime
            .strategies
            .iter()
            .map(|&kind| StrategyConfig {
                kind,
                budget: self.budget,
                retain_k: self.planner.retain_k,
                max_rounds,
                threshold_fraction: self.runtime.threshold_fraction,
                error_loop_limit: self.runtime.error_loop_limit,
            })
            .collect()
    }
}
