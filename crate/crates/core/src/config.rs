//! Pruning configuration and its validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;

/// How multi-head weights are reduced before scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Average post-softmax weights over heads, then score once.
    #[default]
    Averaged,
    /// Select per head, then rank tokens by how many heads kept them.
    PerHead,
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "averaged" | "avg" => Ok(HeadMode::Averaged),
            "per-head" | "perhead" => Ok(HeadMode::PerHead),
            _ => Err(Error::UnknownName {
                kind: "head mode",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Averaged => "averaged",
            HeadMode::PerHead => "per-head",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Maximum cache length `T`. Pruning fires once the cache reaches it.
    pub budget: usize,
    /// Most recent key positions that are always kept and never scored.
    pub recent: usize,
    /// Number of most recent query rows used for scoring.
    pub obs_window: usize,
    /// Share of the selection pool given to inter-modality top-k.
    pub cross_ratio: f64,
    /// Additive constant in the n-softmax denominator.
    pub smooth_n: f64,
    /// Multiplier on the scores of the last `obs_window` candidate keys.
    pub recency_bias: f64,
    /// Grow both top-k sizes until the intersection fills the pool.
    pub widen_to_budget: bool,
    pub head_mode: HeadMode,
    /// Max-pool width over key positions used by the global top-k baseline.
    pub pool_width: usize,
    /// Apply `smooth_n` to the baseline policies as well as CSP.
    pub smooth_baselines: bool,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            budget: 128,
            recent: 32,
            obs_window: 32,
            cross_ratio: 0.5,
            smooth_n: 1.0,
            recency_bias: 1.0,
            widen_to_budget: false,
            head_mode: HeadMode::Averaged,
            pool_width: 1,
            smooth_baselines: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("recent_R >= budget_T ({recent} >= {budget})")]
    RecentNotBelowBudget { recent: usize, budget: usize },
    #[error("obs_window_O must be >= 1")]
    EmptyObservationWindow,
    #[error("cross_ratio_r must lie in [0, 1], got {0}")]
    CrossRatioOutOfRange(f64),
    #[error("smooth_n must be >= 0, got {0}")]
    NegativeSmoothing(f64),
    #[error("recency_bias must be > 0, got {0}")]
    NonPositiveRecencyBias(f64),
    #[error("pool_width must be >= 1")]
    ZeroPoolWidth,
}

impl ConfigError {
    /// Name of the violated invariant.
    pub fn invariant(&self) -> &'static str {
        match self {
            ConfigError::RecentNotBelowBudget { .. } => "recent_R < budget_T",
            ConfigError::EmptyObservationWindow => "obs_window_O >= 1",
            ConfigError::CrossRatioOutOfRange(_) => "0 <= cross_ratio_r <= 1",
            ConfigError::NegativeSmoothing(_) => "smooth_n >= 0",
            ConfigError::NonPositiveRecencyBias(_) => "recency_bias > 0",
            ConfigError::ZeroPoolWidth => "pool_width >= 1",
        }
    }
}

impl PruneConfig {
    /// Returns the config unchanged if every invariant holds, otherwise the first violation.
    pub fn validate(self) -> Result<Self, ConfigError> {
        if self.recent >= self.budget {
            return Err(ConfigError::RecentNotBelowBudget {
                recent: self.recent,
                budget: self.budget,
            });
        }
        if self.obs_window == 0 {
            return Err(ConfigError::EmptyObservationWindow);
        }
        // NaN fails every comparison, so test for membership rather than exclusion
        if !(0.0..=1.0).contains(&self.cross_ratio) {
            return Err(ConfigError::CrossRatioOutOfRange(self.cross_ratio));
        }
        if !(self.smooth_n >= 0.0 && self.smooth_n.is_finite()) {
            return Err(ConfigError::NegativeSmoothing(self.smooth_n));
        }
        if !(self.recency_bias > 0.0 && self.recency_bias.is_finite()) {
            return Err(ConfigError::NonPositiveRecencyBias(self.recency_bias));
        }
        if self.pool_width == 0 {
            return Err(ConfigError::ZeroPoolWidth);
        }
        Ok(self)
    }

    /// Selection pool `max(T - R, 0)`.
    pub fn pool(&self) -> usize {
        self.budget.saturating_sub(self.recent)
    }
}
