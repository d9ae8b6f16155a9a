//! PRM-guided stepwise generation: beam search and Monte Carlo tree search,
//! generic over the generator/scorer contracts.
//!
//! Both algorithms grow partial chains one step at a time, score each
//! partial chain with the configured aggregation of its per-step rewards,
//! and return the best terminal chain found. A chain is terminal when its
//! last step parses a final answer or it has reached the maximum step
//! length.

mod beam;
mod mcts;

pub use beam::beam_search;
pub use mcts::{mcts, uct_select};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, AggregationMethod};
use crate::backends::BackendError;
use crate::domain::{ChainOfThought, DomainError, Step};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("backend failure in round {round}: {source}")]
    BackendFailure {
        round: usize,
        #[source]
        source: BackendError,
    },
    #[error("every beam ran out of continuations")]
    NoViableBeam,
    #[error("no terminal node found within the rollout budget")]
    NoTerminalFound,
    #[error("selection requires at least one child")]
    NoChildren,
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Beam search parameters: `N` beams, prune to the top `N/M` each round,
/// at most `L` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub n_beams: usize,
    pub width: usize,
    pub max_steps: usize,
    pub method: AggregationMethod,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            n_beams: 4,
            width: 4,
            max_steps: 20,
            method: AggregationMethod::Min,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.n_beams < 1 || self.width < 1 || self.max_steps < 1 {
            return Err(SearchError::InvalidConfig(
                "n_beams, width, and max_steps must all be at least 1".into(),
            ));
        }
        if !self.n_beams.is_multiple_of(self.width) {
            return Err(SearchError::InvalidConfig(format!(
                "beam width {} must divide the number of beams {}",
                self.width, self.n_beams
            )));
        }
        Ok(())
    }
}

/// MCTS parameters: `K` rollouts, `d` children per expansion, exploration
/// weight `w`, at most `L` steps per chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub rollouts: usize,
    pub branch: usize,
    pub explore_weight: f64,
    pub max_steps: usize,
    pub method: AggregationMethod,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            rollouts: 16,
            branch: 4,
            explore_weight: 1.0,
            max_steps: 20,
            method: AggregationMethod::Min,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.rollouts < 1 || self.branch < 1 || self.max_steps < 1 {
            return Err(SearchError::InvalidConfig(
                "rollouts, branch, and max_steps must all be at least 1".into(),
            ));
        }
        if !self.explore_weight.is_finite() || self.explore_weight < 0.0 {
            return Err(SearchError::InvalidConfig(
                "explore_weight must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One node of a search tree snapshot: the chain prefix it represents, its
/// value and visit statistics, and whether it is terminal.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub prefix: Vec<Step>,
    pub q_value: f64,
    pub visits: u64,
    pub children: Vec<SearchNode>,
    pub terminal: bool,
}

/// One JSONL trace row describing a search node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub prefix_len: usize,
    pub q: f64,
    pub visits: u64,
    pub terminal: bool,
}

/// Output of a search run: the selected chain, its aggregated score, the
/// number of generation units consumed (one unit = one sampled step), a
/// per-node trace, and for MCTS the final tree snapshot.
#[derive(Debug)]
pub struct SearchResult {
    pub cot: ChainOfThought,
    pub score: f64,
    pub generation_units: u64,
    pub trace: Vec<TraceNode>,
    pub tree: Option<SearchNode>,
}

impl SearchNode {
    /// Preorder trace rows for the subtree rooted here.
    pub fn trace(&self) -> Vec<TraceNode> {
        let mut rows = Vec::new();
        self.collect_trace(&mut rows);
        rows
    }

    fn collect_trace(&self, rows: &mut Vec<TraceNode>) {
        rows.push(TraceNode {
            prefix_len: self.prefix.len(),
            q: self.q_value,
            visits: self.visits,
            terminal: self.terminal,
        });
        for child in &self.children {
            child.collect_trace(rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beam_config_enforces_divisibility() {
        let ok = BeamConfig {
            n_beams: 8,
            width: 2,
            ..BeamConfig::default()
        };
        assert!(ok.validate().is_ok());
        let bad = BeamConfig {
            n_beams: 8,
            width: 3,
            ..BeamConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SearchError::InvalidConfig(_))));
        let zero = BeamConfig {
            n_beams: 0,
            ..BeamConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn mcts_config_bounds() {
        assert!(MctsConfig::default().validate().is_ok());
        assert!(MctsConfig {
            explore_weight: -0.5,
            ..MctsConfig::default()
        }
        .validate()
        .is_err());
        assert!(MctsConfig {
            rollouts: 0,
            ..MctsConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn trace_is_preorder() {
        let leaf = SearchNode {
            prefix: vec![Step::new("Branch 0: x.").unwrap()],
            q_value: 0.5,
            visits: 1,
            children: vec![],
            terminal: true,
        };
        let root = SearchNode {
            prefix: vec![],
            q_value: 0.9,
            visits: 3,
            children: vec![leaf],
            terminal: false,
        };
        let rows = root.trace();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].prefix_len, 0);
        assert_eq!(rows[1].prefix_len, 1);
        assert!(rows[1].terminal);
    }
}
