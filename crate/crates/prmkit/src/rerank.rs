//! Answer selection over a pool of sampled chains of thought: majority
//! voting, score-weighted majority voting, best-of-N, and seeded
//! accuracy-at-N estimation by subsampling.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{aggregate, AggregateError, AggregationMethod};
use crate::domain::{AnswerLabel, ChainOfThought, RewardVector};
use crate::seeding;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("selector requires a reward vector on every candidate")]
    MissingScores,
    #[error("subset size {n} exceeds pool size {pool}")]
    NTooLarge { n: usize, pool: usize },
    #[error("subset size must be at least 1")]
    ZeroN,
    #[error("resamples must be at least 1")]
    ZeroResamples,
    #[error("candidate {index} has question id {found:?}, pool has {expected:?}")]
    QuestionIdMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("candidate {0} has no parseable final answer")]
    UnparsableCandidate(usize),
    #[error("candidate {index}: {scores} scores for {steps} steps")]
    ScoreLengthMismatch {
        index: usize,
        scores: usize,
        steps: usize,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("unknown selector {0:?} (expected mv, wmv, or bon)")]
    UnknownSelector(String),
}

/// Which answer-selection rule to apply to a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Mv,
    Wmv,
    Bon,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::Mv, Selector::Wmv, Selector::Bon];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Mv => "mv",
            Selector::Wmv => "wmv",
            Selector::Bon => "bon",
        }
    }

    /// Runs this selector over the pool. MV ignores `method`.
    pub fn select(
        self,
        pool: &CandidatePool,
        method: AggregationMethod,
    ) -> Result<AnswerLabel, RerankError> {
        match self {
            Selector::Mv => majority_vote(pool),
            Selector::Wmv => weighted_majority_vote(pool, method),
            Selector::Bon => best_of_n(pool, method),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Selector {
    type Err = RerankError;

    fn from_str(s: &str) -> Result<Self, RerankError> {
        match s {
            "mv" => Ok(Selector::Mv),
            "wmv" => Ok(Selector::Wmv),
            "bon" => Ok(Selector::Bon),
            other => Err(RerankError::UnknownSelector(other.to_owned())),
        }
    }
}

/// N candidate chains for one question, each optionally paired with its
/// reward vector. Every chain must end in a parseable answer; unparsable
/// samples are filtered upstream.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    question_id: String,
    items: Vec<(ChainOfThought, Option<RewardVector>)>,
}

impl CandidatePool {
    pub fn new(
        question_id: impl Into<String>,
        items: Vec<(ChainOfThought, Option<RewardVector>)>,
    ) -> Result<Self, RerankError> {
        let question_id = question_id.into();
        for (index, (cot, rv)) in items.iter().enumerate() {
            if cot.question_id() != question_id {
                return Err(RerankError::QuestionIdMismatch {
                    index,
                    expected: question_id,
                    found: cot.question_id().to_owned(),
                });
            }
            if cot.final_answer().is_none() {
                return Err(RerankError::UnparsableCandidate(index));
            }
            if let Some(rv) = rv {
                if rv.len() != cot.k() {
                    return Err(RerankError::ScoreLengthMismatch {
                        index,
                        scores: rv.len(),
                        steps: cot.k(),
                    });
                }
            }
        }
        Ok(CandidatePool { question_id, items })
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn items(&self) -> &[(ChainOfThought, Option<RewardVector>)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> CandidatePool {
        CandidatePool {
            question_id: self.question_id.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    fn answer(&self, index: usize) -> AnswerLabel {
        self.items[index]
            .0
            .final_answer()
            .expect("validated at construction")
    }

    /// Aggregated score of every item, or MissingScores if any lacks one.
    fn aggregated(&self, method: AggregationMethod) -> Result<Vec<f64>, RerankError> {
        self.items
            .iter()
            .map(|(_, rv)| {
                let rv = rv.as_ref().ok_or(RerankError::MissingScores)?;
                Ok(aggregate(rv, method)?)
            })
            .collect()
    }
}

/// Chooses among per-answer candidates: highest primary metric first, then
/// the larger total aggregated score when available, then the
/// lexicographically smallest label. Order-free by construction.
fn pick_answer(candidates: &BTreeMap<AnswerLabel, (f64, Option<f64>)>) -> AnswerLabel {
    let mut best: Option<(AnswerLabel, (f64, Option<f64>))> = None;
    for (&label, &(primary, total)) in candidates {
        let better = match &best {
            None => true,
            Some((_, (bp, bt))) => {
                if primary != *bp {
                    primary > *bp
                } else {
                    match (total, bt) {
                        (Some(t), Some(b)) if t != *b => t > *b,
                        // Equal on every metric: keep the earlier (smaller)
                        // label from the ordered map.
                        _ => false,
                    }
                }
            }
        };
        if better {
            best = Some((label, (primary, total)));
        }
    }
    best.expect("non-empty candidate map").0
}

/// The answer appearing most frequently in the pool.
///
/// Count ties prefer the answer with the larger total min-aggregated score
/// when every candidate carries scores, then the lexicographically smallest
/// label.
pub fn majority_vote(pool: &CandidatePool) -> Result<AnswerLabel, RerankError> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let totals = pool.aggregated(AggregationMethod::Min).ok();
    let mut by_answer: BTreeMap<AnswerLabel, (f64, Option<f64>)> = BTreeMap::new();
    for i in 0..pool.len() {
        let entry = by_answer.entry(pool.answer(i)).or_insert((0.0, None));
        entry.0 += 1.0;
        if let Some(totals) = &totals {
            entry.1 = Some(entry.1.unwrap_or(0.0) + totals[i]);
        }
    }
    Ok(pick_answer(&by_answer))
}

/// The answer with the largest sum of aggregated scores over its candidates.
pub fn weighted_majority_vote(
    pool: &CandidatePool,
    method: AggregationMethod,
) -> Result<AnswerLabel, RerankError> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let scores = pool.aggregated(method)?;
    let mut by_answer: BTreeMap<AnswerLabel, (f64, Option<f64>)> = BTreeMap::new();
    for (i, &score) in scores.iter().enumerate() {
        let entry = by_answer.entry(pool.answer(i)).or_insert((0.0, Some(0.0)));
        entry.0 += score;
        entry.1 = Some(entry.1.unwrap_or(0.0) + score);
    }
    Ok(pick_answer(&by_answer))
}

/// The final answer of the single highest-scoring candidate.
pub fn best_of_n(
    pool: &CandidatePool,
    method: AggregationMethod,
) -> Result<AnswerLabel, RerankError> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    let scores = pool.aggregated(method)?;
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut by_answer: BTreeMap<AnswerLabel, (f64, Option<f64>)> = BTreeMap::new();
    let mut answer_totals: BTreeMap<AnswerLabel, f64> = BTreeMap::new();
    for (i, &score) in scores.iter().enumerate() {
        *answer_totals.entry(pool.answer(i)).or_insert(0.0) += score;
    }
    for (i, &score) in scores.iter().enumerate() {
        if score == best {
            let answer = pool.answer(i);
            by_answer.insert(answer, (best, Some(answer_totals[&answer])));
        }
    }
    Ok(pick_answer(&by_answer))
}

/// Estimates the accuracy of `selector` at pool size `n` by drawing
/// `resamples` uniform subsets without replacement.
///
/// Deterministic given `(seed, pool order, n, resamples)`: resample `r` uses
/// an RNG stream derived from `(seed, r)`.
pub fn accuracy_at_n(
    pool: &CandidatePool,
    truth: AnswerLabel,
    n: usize,
    resamples: usize,
    seed: u64,
    selector: Selector,
    method: AggregationMethod,
) -> Result<f64, RerankError> {
    if pool.is_empty() {
        return Err(RerankError::EmptyPool);
    }
    if n == 0 {
        return Err(RerankError::ZeroN);
    }
    if n > pool.len() {
        return Err(RerankError::NTooLarge {
            n,
            pool: pool.len(),
        });
    }
    if resamples == 0 {
        return Err(RerankError::ZeroResamples);
    }
    let mut correct = 0usize;
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for r in 0..resamples {
        let mut rng = seeding::derive_rng(seed, &[r as u64]);
        // Partial Fisher-Yates: the first n entries become the subset.
        for i in 0..n {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        let subset = pool.subset(&indices[..n]);
        if selector.select(&subset, method)? == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / resamples as f64)
}
