//! A deterministic mock world: a seeded, enumerable reasoning tree whose
//! step texts, terminal answers, and PRM scores are pure functions of the
//! configuration. Desk-scale tests enumerate the whole tree by brute force
//! and compare search or reranking outputs against the exact optimum.
//!
//! Shape: a complete tree of branching factor `b` and depth `D`, so `b^D`
//! terminals. A contiguous index region (wrapping at the end) of size
//! `max(1, round(density · b^D))` is designated correct; terminals inside it
//! answer the world's correct label, the rest answer a hash-derived label.
//! A node is "on a correct path" when its terminal span intersects the
//! region; step scores are that bit's mean plus bounded deterministic noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, GenParams, GeneratorContract, ScorerContract};
use crate::domain::{
    final_answer_sentence, AnswerLabel, FirstBadIndex, Question, RewardVector, Step,
};
use crate::seeding;

/// Configuration of one mock world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorldConfig {
    pub seed: u64,
    /// Children per node, `b ≥ 1`.
    pub branching: usize,
    /// Terminal depth `D ≥ 1`.
    pub depth: usize,
    /// Fraction of terminals designated correct (at least one is).
    pub correct_path_density: f64,
    pub score_correct_mean: f64,
    pub score_incorrect_mean: f64,
    /// Half-width of the uniform score noise, in `[0, 1]`.
    pub score_noise: f64,
}

impl Default for MockWorldConfig {
    fn default() -> Self {
        MockWorldConfig {
            seed: 0,
            branching: 2,
            depth: 3,
            correct_path_density: 0.25,
            score_correct_mean: 0.9,
            score_incorrect_mean: 0.1,
            score_noise: 0.0,
        }
    }
}

impl MockWorldConfig {
    /// A copy whose seed also encodes `question_id`, giving each question
    /// its own world under a shared base seed.
    pub fn for_question(&self, question_id: &str) -> MockWorldConfig {
        MockWorldConfig {
            seed: seeding::mix(self.seed, &[seeding::hash_str(question_id)]),
            ..self.clone()
        }
    }
}

/// Validated, precomputed view of a world configuration.
struct World {
    seed: u64,
    b: u64,
    d: usize,
    terminals: u64,
    region_start: u64,
    region_len: u64,
    correct_mean: f64,
    incorrect_mean: f64,
    noise: f64,
}

impl World {
    fn new(cfg: &MockWorldConfig) -> Result<World, BackendError> {
        if cfg.branching < 1 {
            return Err(BackendError::InvalidMockConfig(
                "branching must be at least 1".into(),
            ));
        }
        if cfg.depth < 1 {
            return Err(BackendError::InvalidMockConfig(
                "depth must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("correct_path_density", cfg.correct_path_density),
            ("score_correct_mean", cfg.score_correct_mean),
            ("score_incorrect_mean", cfg.score_incorrect_mean),
            ("score_noise", cfg.score_noise),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(BackendError::InvalidMockConfig(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        let terminals = (cfg.branching as u64)
            .checked_pow(cfg.depth as u32)
            .ok_or_else(|| {
                BackendError::InvalidMockConfig("branching^depth overflows u64".into())
            })?;
        let region_len = ((cfg.correct_path_density * terminals as f64).round() as u64)
            .clamp(1, terminals);
        let region_start = seeding::mix(cfg.seed, &[seeding::hash_str("region")]) % terminals;
        Ok(World {
            seed: cfg.seed,
            b: cfg.branching as u64,
            d: cfg.depth,
            terminals,
            region_start,
            region_len,
            correct_mean: cfg.score_correct_mean,
            incorrect_mean: cfg.score_incorrect_mean,
            noise: cfg.score_noise,
        })
    }

    /// The label every correct-region terminal answers.
    fn correct_label(&self) -> AnswerLabel {
        let ord = seeding::mix(self.seed, &[seeding::hash_str("truth")]) % 10;
        AnswerLabel::from_ordinal(ord as usize).expect("mod 10 is in range")
    }

    /// First terminal index covered by the node at `path`.
    fn span_base(&self, path: &[u64]) -> u64 {
        let mut base = 0u64;
        for (i, &c) in path.iter().enumerate() {
            base += c * self.b.pow((self.d - 1 - i) as u32);
        }
        base
    }

    fn in_region(&self, terminal_index: u64) -> bool {
        (terminal_index + self.terminals - self.region_start) % self.terminals < self.region_len
    }

    /// Whether the subtree at `path` contains any correct-region terminal.
    fn on_correct_path(&self, path: &[u64]) -> bool {
        let base = self.span_base(path);
        let len = self.b.pow((self.d - path.len()) as u32);
        // The region may wrap; check both of its linear pieces.
        let first_len = self.region_len.min(self.terminals - self.region_start);
        let wrapped_len = self.region_len - first_len;
        let overlaps = |lo: u64, hi: u64| base < hi && base + len > lo;
        overlaps(self.region_start, self.region_start + first_len)
            || (wrapped_len > 0 && overlaps(0, wrapped_len))
    }

    fn terminal_answer(&self, terminal_index: u64) -> AnswerLabel {
        if self.in_region(terminal_index) {
            self.correct_label()
        } else {
            let ord =
                seeding::mix(self.seed, &[seeding::hash_str("answer"), terminal_index]) % 10;
            AnswerLabel::from_ordinal(ord as usize).expect("mod 10 is in range")
        }
    }

    /// Score of the step that ends `prefix` (a path of length ≥ 1).
    fn step_score(&self, prefix: &[u64]) -> f64 {
        let mean = if self.on_correct_path(prefix) {
            self.correct_mean
        } else {
            self.incorrect_mean
        };
        let mut parts = vec![seeding::hash_str("noise")];
        parts.extend_from_slice(prefix);
        let jitter = (seeding::unit_f64(seeding::mix(self.seed, &parts)) * 2.0 - 1.0) * self.noise;
        (mean + jitter).clamp(0.0, 1.0)
    }

    /// Text of the child step `c` entered at depth `depth` (1-based).
    fn step_text(&self, path: &[u64], depth: usize) -> String {
        let c = *path.last().expect("non-empty path");
        if depth == self.d {
            let answer = self.terminal_answer(self.span_base(path));
            format!(
                "Branch {c}: combining the evidence, {}.",
                final_answer_sentence(answer)
            )
        } else {
            format!("Branch {c}: narrow the candidates at depth {depth}.")
        }
    }

    /// Decodes steps produced by this world back into child indices.
    fn decode(&self, steps: &[Step]) -> Result<Vec<u64>, BackendError> {
        if steps.len() > self.d {
            return Err(BackendError::PrefixTooDeep {
                depth: steps.len(),
                max: self.d,
            });
        }
        let mut path = Vec::with_capacity(steps.len());
        for step in steps {
            let text = step.text();
            let digits = text
                .strip_prefix("Branch ")
                .and_then(|rest| rest.split_once(':'))
                .map(|(digits, _)| digits)
                .ok_or_else(|| BackendError::UnknownPath(text.to_owned()))?;
            let c: u64 = digits
                .parse()
                .map_err(|_| BackendError::UnknownPath(text.to_owned()))?;
            if c >= self.b {
                return Err(BackendError::UnknownPath(format!(
                    "child {c} out of range for branching {}",
                    self.b
                )));
            }
            path.push(c);
        }
        Ok(path)
    }
}

/// Number of terminals (`branching^depth`) in the world.
pub fn mock_terminal_count(cfg: &MockWorldConfig) -> Result<u64, BackendError> {
    Ok(World::new(cfg)?.terminals)
}

/// The label answered by the world's correct terminal region.
pub fn mock_correct_label(cfg: &MockWorldConfig) -> Result<AnswerLabel, BackendError> {
    Ok(World::new(cfg)?.correct_label())
}

/// Child steps of `prefix`: `min(count, branching)` distinct children in
/// child order. At the terminal layer each step embeds `the answer is (X)`.
/// Terminal prefixes yield an empty list.
pub fn mock_next_steps(
    cfg: &MockWorldConfig,
    prefix: &[Step],
    count: usize,
) -> Result<Vec<Step>, BackendError> {
    let world = World::new(cfg)?;
    let path = world.decode(prefix)?;
    if path.len() == world.d {
        return Ok(Vec::new());
    }
    let depth = path.len() + 1;
    let mut steps = Vec::new();
    for c in 0..world.b.min(count as u64) {
        let mut child = path.clone();
        child.push(c);
        steps.push(Step::new(world.step_text(&child, depth))?);
    }
    Ok(steps)
}

/// Per-step scores for a path through the world: the correctness-bit mean
/// plus deterministic noise, clamped to `[0, 1]`.
///
/// The question parameter exists for contract parity; scores depend only on
/// `(seed, path)`.
pub fn mock_score(
    cfg: &MockWorldConfig,
    _question: &Question,
    steps: &[Step],
) -> Result<RewardVector, BackendError> {
    let world = World::new(cfg)?;
    let path = world.decode(steps)?;
    let scores: Vec<f64> = (1..=path.len())
        .map(|i| world.step_score(&path[..i]))
        .collect();
    Ok(RewardVector::new(scores)?)
}

/// Oracle first-bad index for a path: the first step leaving every correct
/// path, or −1 when the whole prefix stays on one.
pub fn mock_first_bad(cfg: &MockWorldConfig, steps: &[Step]) -> Result<FirstBadIndex, BackendError> {
    let world = World::new(cfg)?;
    let path = world.decode(steps)?;
    for i in 1..=path.len() {
        if !world.on_correct_path(&path[..i]) {
            return Ok(FirstBadIndex::new(i as i64 - 1, path.len())?);
        }
    }
    Ok(FirstBadIndex::ALL_GOOD)
}

/// A ten-option question whose truth is the world's correct label.
pub fn mock_question(
    cfg: &MockWorldConfig,
    id: &str,
    category: &str,
) -> Result<Question, BackendError> {
    let world = World::new(cfg)?;
    let truth = world.correct_label();
    let options = (0..AnswerLabel::COUNT)
        .map(|i| {
            let label = AnswerLabel::from_ordinal(i).expect("in range");
            (label, format!("Option {}", label.letter()))
        })
        .collect();
    Ok(Question::new(
        id,
        category,
        format!("Mock world {id}: which option does the designated terminal region select?"),
        options,
        truth,
        Some(format!(
            "The designated terminal region selects option {}.",
            truth.letter()
        )),
    )?)
}

/// Mock implementation of [`GeneratorContract`].
///
/// In per-question mode each question gets its own world derived from the
/// base seed and the question id; in shared mode every question sees the
/// same tree, which is what desk-scale oracle tests want.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    cfg: MockWorldConfig,
    per_question: bool,
}

impl MockGenerator {
    /// One world for all questions (oracle tests).
    pub fn shared_world(cfg: MockWorldConfig) -> Self {
        MockGenerator {
            cfg,
            per_question: false,
        }
    }

    /// A separate world per question id (dataset generation).
    pub fn per_question(cfg: MockWorldConfig) -> Self {
        MockGenerator {
            cfg,
            per_question: true,
        }
    }

    fn world_for(&self, question: &Question) -> MockWorldConfig {
        if self.per_question {
            self.cfg.for_question(question.id())
        } else {
            self.cfg.clone()
        }
    }
}

impl GeneratorContract for MockGenerator {
    fn next_steps(
        &self,
        question: &Question,
        prefix: &[Step],
        count: usize,
        _params: &GenParams,
    ) -> Result<Vec<Step>, BackendError> {
        mock_next_steps(&self.world_for(question), prefix, count)
    }

    /// Samples one root-to-terminal path; variation comes from
    /// `params.seed`, so distinct seeds give an i.i.d.-style pool.
    fn complete(&self, question: &Question, params: &GenParams) -> Result<String, BackendError> {
        let cfg = self.world_for(question);
        let world = World::new(&cfg)?;
        let mut rng = seeding::derive_rng(
            world.seed,
            &[seeding::hash_str("complete"), params.seed.unwrap_or(0)],
        );
        let mut path: Vec<u64> = Vec::with_capacity(world.d);
        let mut texts = Vec::with_capacity(world.d);
        for depth in 1..=world.d {
            path.push(rng.random_range(0..world.b));
            texts.push(world.step_text(&path, depth));
        }
        Ok(texts.join("\n\n"))
    }
}

/// Mock implementation of [`ScorerContract`].
#[derive(Debug, Clone)]
pub struct MockScorer {
    cfg: MockWorldConfig,
    per_question: bool,
}

impl MockScorer {
    pub fn shared_world(cfg: MockWorldConfig) -> Self {
        MockScorer {
            cfg,
            per_question: false,
        }
    }

    pub fn per_question(cfg: MockWorldConfig) -> Self {
        MockScorer {
            cfg,
            per_question: true,
        }
    }

    fn world_for(&self, question: &Question) -> MockWorldConfig {
        if self.per_question {
            self.cfg.for_question(question.id())
        } else {
            self.cfg.clone()
        }
    }
}

impl ScorerContract for MockScorer {
    fn score(&self, question: &Question, steps: &[Step]) -> Result<RewardVector, BackendError> {
        mock_score(&self.world_for(question), question, steps)
    }
}
