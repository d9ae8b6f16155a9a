//! Beam search over stepwise continuations, pruned by aggregated PRM score.

use super::{BeamConfig, SearchError, SearchResult, TraceNode};
use crate::aggregate::aggregate;
use crate::backends::{BackendError, GenParams, GeneratorContract, ScorerContract};
use crate::domain::{parse_final_answer, ChainOfThought, GenMeta, Question, Step};

struct Beam {
    steps: Vec<Step>,
    score: f64,
    terminal: bool,
}

/// Runs beam search: starting from the bare prompt, each round expands the
/// surviving beams to `n_beams` total continuations (terminal beams are
/// frozen and consume no generation budget, but keep competing on score),
/// scores every candidate with the configured aggregation, and retains the
/// top `n_beams / width`. Stops when every beam is terminal or `max_steps`
/// rounds have elapsed; returns the highest-scoring beam.
pub fn beam_search(
    gen: &dyn GeneratorContract,
    scorer: &dyn ScorerContract,
    question: &Question,
    cfg: &BeamConfig,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let params = GenParams::default();
    let fail = |round: usize| move |source: BackendError| SearchError::BackendFailure { round, source };

    let mut beams = vec![Beam {
        steps: Vec::new(),
        score: 0.0,
        terminal: false,
    }];
    let mut units: u64 = 0;
    let mut trace: Vec<TraceNode> = Vec::new();

    for round in 1..=cfg.max_steps {
        if beams.iter().all(|b| b.terminal) {
            break;
        }
        let (frozen, expandable): (Vec<Beam>, Vec<Beam>) =
            beams.into_iter().partition(|b| b.terminal);
        let mut candidates = frozen;

        // Distribute the n_beams expansion budget evenly (difference at most
        // one) over the beams that can still grow.
        let live = expandable.len();
        let base = cfg.n_beams / live;
        let extra = cfg.n_beams % live;
        for (i, beam) in expandable.into_iter().enumerate() {
            let quota = base + usize::from(i < extra);
            let steps = gen
                .next_steps(question, &beam.steps, quota, &params)
                .map_err(fail(round))?;
            units += steps.len() as u64;
            for step in steps {
                let mut prefix = beam.steps.clone();
                prefix.push(step);
                let rv = scorer.score(question, &prefix).map_err(fail(round))?;
                let score = aggregate(&rv, cfg.method)?;
                let terminal = parse_final_answer(prefix.last().expect("non-empty").text())
                    .is_some()
                    || prefix.len() >= cfg.max_steps;
                trace.push(TraceNode {
                    prefix_len: prefix.len(),
                    q: score,
                    visits: 0,
                    terminal,
                });
                candidates.push(Beam {
                    steps: prefix,
                    score,
                    terminal,
                });
            }
        }

        if candidates.is_empty() {
            return Err(SearchError::NoViableBeam);
        }
        // Stable sort: ties keep frozen-then-generation order, so the whole
        // round is deterministic.
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("scores are finite"));
        candidates.truncate((cfg.n_beams / cfg.width).max(1));
        beams = candidates;
    }

    let best = beams
        .iter()
        .enumerate()
        .reduce(|acc, item| if item.1.score > acc.1.score { item } else { acc })
        .map(|(i, _)| i)
        .expect("at least one beam survives");
    let best = beams.swap_remove(best);
    let gen_meta = GenMeta {
        model_id: "beam-search".to_owned(),
        temperature: params.temperature,
        seed: None,
    };
    Ok(SearchResult {
        cot: ChainOfThought::new(question.id(), best.steps, gen_meta)?,
        score: best.score,
        generation_units: units,
        trace,
        tree: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AggregationMethod;
    use crate::backends::{
        mock_next_steps, mock_question, mock_score, MockGenerator, MockScorer, MockWorldConfig,
    };
    use crate::domain::RewardVector;

    fn world() -> MockWorldConfig {
        MockWorldConfig {
            seed: 11,
            branching: 2,
            depth: 3,
            correct_path_density: 0.25,
            score_correct_mean: 0.9,
            score_incorrect_mean: 0.1,
            score_noise: 0.05,
        }
    }

    fn cfg(n: usize, m: usize) -> BeamConfig {
        BeamConfig {
            n_beams: n,
            width: m,
            max_steps: 8,
            method: AggregationMethod::Min,
        }
    }

    /// Exhaustive max of aggregated min-score over all terminals.
    fn brute_force_best(w: &MockWorldConfig, question: &Question) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut stack = vec![Vec::<Step>::new()];
        while let Some(prefix) = stack.pop() {
            let children = mock_next_steps(w, &prefix, w.branching).unwrap();
            if children.is_empty() {
                let rv = mock_score(w, question, &prefix).unwrap();
                let score = aggregate(&rv, AggregationMethod::Min).unwrap();
                best = best.max(score);
                continue;
            }
            for child in children {
                let mut next = prefix.clone();
                next.push(child);
                stack.push(next);
            }
        }
        best
    }

    #[test]
    fn degenerate_beam_is_greedy_descent() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let gen = MockGenerator::shared_world(w.clone());
        let scorer = MockScorer::shared_world(w.clone());
        let result = beam_search(&gen, &scorer, &q, &cfg(1, 1)).unwrap();

        // Manual greedy walk: one sampled child per round.
        let mut prefix = Vec::new();
        for _ in 0..3 {
            let next = mock_next_steps(&w, &prefix, 1).unwrap();
            prefix.push(next.into_iter().next().unwrap());
        }
        assert_eq!(result.cot.steps(), prefix.as_slice());
        assert_eq!(result.generation_units, 3);
    }

    #[test]
    fn exhaustive_width_finds_the_global_optimum() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let gen = MockGenerator::shared_world(w.clone());
        let scorer = MockScorer::shared_world(w.clone());
        let result = beam_search(&gen, &scorer, &q, &cfg(8, 2)).unwrap();
        assert!(result.cot.final_answer().is_some());
        let best = brute_force_best(&w, &q);
        assert_eq!(result.score, best);
    }

    #[test]
    fn step_cap_returns_partial_chain() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let gen = MockGenerator::shared_world(w.clone());
        let scorer = MockScorer::shared_world(w);
        let capped = BeamConfig {
            max_steps: 1,
            ..cfg(2, 2)
        };
        let result = beam_search(&gen, &scorer, &q, &capped).unwrap();
        assert_eq!(result.cot.k(), 1);
        assert_eq!(result.cot.final_answer(), None);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let gen = MockGenerator::shared_world(w.clone());
        let scorer = MockScorer::shared_world(w);
        let a = beam_search(&gen, &scorer, &q, &cfg(4, 2)).unwrap();
        let b = beam_search(&gen, &scorer, &q, &cfg(4, 2)).unwrap();
        assert_eq!(a.cot, b.cot);
        assert_eq!(a.score, b.score);
        assert_eq!(a.generation_units, b.generation_units);
    }

    struct EmptyGen;
    impl GeneratorContract for EmptyGen {
        fn next_steps(
            &self,
            _q: &Question,
            _p: &[Step],
            _c: usize,
            _params: &GenParams,
        ) -> Result<Vec<Step>, BackendError> {
            Ok(Vec::new())
        }
        fn complete(&self, _q: &Question, _p: &GenParams) -> Result<String, BackendError> {
            Ok(String::new())
        }
    }

    struct FailingGen;
    impl GeneratorContract for FailingGen {
        fn next_steps(
            &self,
            _q: &Question,
            _p: &[Step],
            _c: usize,
            _params: &GenParams,
        ) -> Result<Vec<Step>, BackendError> {
            Err(BackendError::Timeout { request_index: 0 })
        }
        fn complete(&self, _q: &Question, _p: &GenParams) -> Result<String, BackendError> {
            Err(BackendError::Timeout { request_index: 0 })
        }
    }

    struct UnitScorer;
    impl ScorerContract for UnitScorer {
        fn score(&self, _q: &Question, steps: &[Step]) -> Result<RewardVector, BackendError> {
            Ok(RewardVector::new(vec![1.0; steps.len()])?)
        }
    }

    #[test]
    fn empty_continuations_are_no_viable_beam() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let result = beam_search(&EmptyGen, &UnitScorer, &q, &cfg(2, 2));
        assert!(matches!(result, Err(SearchError::NoViableBeam)));
    }

    #[test]
    fn backend_failures_carry_the_round() {
        let w = world();
        let q = mock_question(&w, "q", "Math").unwrap();
        let result = beam_search(&FailingGen, &UnitScorer, &q, &cfg(2, 2));
        match result {
            Err(SearchError::BackendFailure { round, .. }) => assert_eq!(round, 1),
            other => panic!("expected backend failure, got {other:?}"),
        }
    }
}
