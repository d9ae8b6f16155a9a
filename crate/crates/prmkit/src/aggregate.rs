//! Scalarizing a per-step reward vector into one CoT-level score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::RewardVector;

/// How a reward vector collapses to a single score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    /// Minimum step score in the chain.
    Min,
    /// Score of the last step.
    Last,
    /// Arithmetic mean of the step scores.
    Avg,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 3] = [
        AggregationMethod::Min,
        AggregationMethod::Last,
        AggregationMethod::Avg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMethod::Min => "min",
            AggregationMethod::Last => "last",
            AggregationMethod::Avg => "avg",
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AggregationMethod {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, AggregateError> {
        match s {
            "min" => Ok(AggregationMethod::Min),
            "last" => Ok(AggregationMethod::Last),
            "avg" => Ok(AggregationMethod::Avg),
            other => Err(AggregateError::UnknownMethod(other.to_owned())),
        }
    }
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("cannot aggregate an empty reward vector")]
    EmptyRewardVector,
    #[error("unknown aggregation method {0:?} (expected min, last, or avg)")]
    UnknownMethod(String),
}

/// Collapses `rv` to one score in `[0, 1]`.
///
/// Out-of-range scores cannot occur here: [`RewardVector`] rejects them at
/// construction, and remote scorers clamp at ingestion in the backends
/// module.
pub fn aggregate(rv: &RewardVector, method: AggregationMethod) -> Result<f64, AggregateError> {
    let scores = rv.scores();
    if scores.is_empty() {
        return Err(AggregateError::EmptyRewardVector);
    }
    let value = match method {
        AggregationMethod::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
        AggregationMethod::Last => *scores.last().expect("non-empty"),
        AggregationMethod::Avg => scores.iter().sum::<f64>() / scores.len() as f64,
    };
    Ok(value)
}
