//! Domain types shared by every module: questions, reasoning steps, chains
//! of thought, reward vectors, and step labels, plus final-answer parsing and
//! step segmentation.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so they are safe to share across threads.

use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 14 MMLU-Pro domain names, in stable alphabetical order.
pub const MMLU_PRO_CATEGORIES: [&str; 14] = [
    "Biology",
    "Business",
    "Chemistry",
    "Computer Science",
    "Economics",
    "Engineering",
    "Health",
    "History",
    "Law",
    "Math",
    "Other",
    "Philosophy",
    "Physics",
    "Psychology",
];

/// Errors raised by domain-type construction and parsing.
#[derive(Debug, Error)]
pub enum DomainError {
    #[error("answer letter {0:?} is not in A..J")]
    InvalidAnswerLetter(char),
    #[error("answer ordinal {0} is not in 0..10")]
    AnswerOrdinalOutOfRange(usize),
    #[error("step text is empty after trimming")]
    EmptyStep,
    #[error("step text contains a blank line")]
    StepContainsBlankLine,
    #[error("no non-empty steps in input")]
    EmptyCot,
    #[error("question id is empty")]
    EmptyQuestionId,
    #[error("category {0:?} is not an MMLU-Pro domain")]
    UnknownCategory(String),
    #[error("question has no options")]
    NoOptions,
    #[error("question has {0} options; MMLU-Pro caps at 10")]
    TooManyOptions(usize),
    #[error("option labels must form A, B, C, … in order without gaps")]
    OptionLabelsNotPrefix,
    #[error("truth label {0} is not among the question's options")]
    TruthNotAnOption(char),
    #[error("reward score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("first-bad index {value} is outside {{-1}} ∪ {{0..{k}}}")]
    FirstBadOutOfRange { value: i64, k: usize },
    #[error("labels must be +1s followed by at most one trailing -1")]
    LabelSequenceInvalid,
    #[error("{labels} labels for {steps} steps")]
    LabelLengthMismatch { labels: usize, steps: usize },
    #[error("declared final answer {declared} does not match the last step (parsed {parsed:?})")]
    InconsistentFinalAnswer {
        declared: char,
        parsed: Option<char>,
    },
}

/// Line-addressed errors from reading JSONL datasets.
#[derive(Debug, Error)]
pub enum JsonlError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

// ---------------------------------------------------------------------------
// Answer labels
// ---------------------------------------------------------------------------

/// One of the ten multiple-choice answer letters A..J.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnswerLabel(u8);

impl AnswerLabel {
    pub const COUNT: usize = 10;

    pub fn from_letter(c: char) -> Result<Self, DomainError> {
        if ('A'..='J').contains(&c) {
            Ok(AnswerLabel(c as u8 - b'A'))
        } else {
            Err(DomainError::InvalidAnswerLetter(c))
        }
    }

    pub fn from_ordinal(i: usize) -> Result<Self, DomainError> {
        if i < Self::COUNT {
            Ok(AnswerLabel(i as u8))
        } else {
            Err(DomainError::AnswerOrdinalOutOfRange(i))
        }
    }

    pub fn letter(self) -> char {
        (b'A' + self.0) as char
    }

    /// Position in A..J: A = 0, …, J = 9.
    pub fn ordinal(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl Serialize for AnswerLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.letter().to_string())
    }
}

impl<'de> Deserialize<'de> for AnswerLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => AnswerLabel::from_letter(c).map_err(serde::de::Error::custom),
            _ => Err(serde::de::Error::custom(format!(
                "answer label must be a single letter A..J, got {s:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Questions
// ---------------------------------------------------------------------------

/// A multiple-choice question with 1–10 lettered options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuestionRaw", into = "QuestionRaw")]
pub struct Question {
    id: String,
    category: String,
    text: String,
    options: Vec<(AnswerLabel, String)>,
    truth: AnswerLabel,
    reference_explanation: Option<String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct QuestionRaw {
    id: String,
    category: String,
    text: String,
    options: Vec<QuestionOptionRaw>,
    truth: AnswerLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_explanation: Option<String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct QuestionOptionRaw {
    label: AnswerLabel,
    body: String,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        category: impl Into<String>,
        text: impl Into<String>,
        options: Vec<(AnswerLabel, String)>,
        truth: AnswerLabel,
        reference_explanation: Option<String>,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let category = category.into();
        if id.is_empty() {
            return Err(DomainError::EmptyQuestionId);
        }
        if !MMLU_PRO_CATEGORIES.contains(&category.as_str()) {
            return Err(DomainError::UnknownCategory(category));
        }
        if options.is_empty() {
            return Err(DomainError::NoOptions);
        }
        if options.len() > AnswerLabel::COUNT {
            return Err(DomainError::TooManyOptions(options.len()));
        }
        // Labels must be exactly A, B, … in positional order, which also
        // rules out duplicates.
        for (i, (label, _)) in options.iter().enumerate() {
            if label.ordinal() != i {
                return Err(DomainError::OptionLabelsNotPrefix);
            }
        }
        if truth.ordinal() >= options.len() {
            return Err(DomainError::TruthNotAnOption(truth.letter()));
        }
        Ok(Question {
            id,
            category,
            text: text.into(),
            options,
            truth,
            reference_explanation,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn options(&self) -> &[(AnswerLabel, String)] {
        &self.options
    }

    pub fn truth(&self) -> AnswerLabel {
        self.truth
    }

    pub fn reference_explanation(&self) -> Option<&str> {
        self.reference_explanation.as_deref()
    }

    /// The question text followed by one `X. body` line per option.
    pub fn rendered_with_options(&self) -> String {
        let mut out = self.text.clone();
        for (label, body) in &self.options {
            out.push('\n');
            out.push_str(&format!("{}. {}", label.letter(), body));
        }
        out
    }
}

impl TryFrom<QuestionRaw> for Question {
    type Error = DomainError;

    fn try_from(raw: QuestionRaw) -> Result<Self, DomainError> {
        Question::new(
            raw.id,
            raw.category,
            raw.text,
            raw.options.into_iter().map(|o| (o.label, o.body)).collect(),
            raw.truth,
            raw.reference_explanation,
        )
    }
}

impl From<Question> for QuestionRaw {
    fn from(q: Question) -> QuestionRaw {
        QuestionRaw {
            id: q.id,
            category: q.category,
            text: q.text,
            options: q
                .options
                .into_iter()
                .map(|(label, body)| QuestionOptionRaw { label, body })
                .collect(),
            truth: q.truth,
            reference_explanation: q.reference_explanation,
        }
    }
}

// ---------------------------------------------------------------------------
// Steps and chains of thought
// ---------------------------------------------------------------------------

/// One reasoning step: non-empty trimmed text with no internal blank line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Step {
    text: String,
}

impl Step {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into().trim().to_owned();
        if text.is_empty() {
            return Err(DomainError::EmptyStep);
        }
        if text.contains("\n\n") {
            return Err(DomainError::StepContainsBlankLine);
        }
        Ok(Step { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl TryFrom<String> for Step {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, DomainError> {
        Step::new(s)
    }
}

impl From<Step> for String {
    fn from(s: Step) -> String {
        s.text
    }
}

/// Generation metadata carried alongside a sampled chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub model_id: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenMeta {
    pub fn mock(seed: u64) -> Self {
        GenMeta {
            model_id: "mock".to_owned(),
            temperature: 0.0,
            seed: Some(seed),
        }
    }
}

/// An ordered sequence of reasoning steps, optionally ending in a parsed
/// final answer.
///
/// The final answer is always derived from the last step at construction, so
/// the two can never disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CotRecord", into = "CotRecord")]
pub struct ChainOfThought {
    question_id: String,
    steps: Vec<Step>,
    final_answer: Option<AnswerLabel>,
    gen_meta: GenMeta,
}

/// JSONL wire form of a [`ChainOfThought`] pool record.
#[derive(Clone, Serialize, Deserialize)]
struct CotRecord {
    question_id: String,
    steps: Vec<Step>,
    final_answer: Option<AnswerLabel>,
    gen_meta: GenMeta,
}

impl ChainOfThought {
    pub fn new(
        question_id: impl Into<String>,
        steps: Vec<Step>,
        gen_meta: GenMeta,
    ) -> Result<Self, DomainError> {
        let question_id = question_id.into();
        if question_id.is_empty() {
            return Err(DomainError::EmptyQuestionId);
        }
        if steps.is_empty() {
            return Err(DomainError::EmptyCot);
        }
        let final_answer = parse_final_answer(steps.last().expect("non-empty").text());
        Ok(ChainOfThought {
            question_id,
            steps,
            final_answer,
            gen_meta,
        })
    }

    /// Splits raw generated text into steps and builds the chain.
    pub fn from_text(
        question_id: impl Into<String>,
        text: &str,
        gen_meta: GenMeta,
    ) -> Result<Self, DomainError> {
        let steps = split_steps(text)?;
        ChainOfThought::new(question_id, steps, gen_meta)
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn final_answer(&self) -> Option<AnswerLabel> {
        self.final_answer
    }

    pub fn gen_meta(&self) -> &GenMeta {
        &self.gen_meta
    }

    /// Steps joined by the canonical two-newline delimiter.
    pub fn joined_text(&self) -> String {
        self.steps
            .iter()
            .map(Step::text)
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// A copy truncated to the first `len` steps (final answer re-derived).
    pub fn truncated(&self, len: usize) -> Result<Self, DomainError> {
        if len == 0 || len > self.steps.len() {
            return Err(DomainError::EmptyCot);
        }
        ChainOfThought::new(
            self.question_id.clone(),
            self.steps[..len].to_vec(),
            self.gen_meta.clone(),
        )
    }
}

impl TryFrom<CotRecord> for ChainOfThought {
    type Error = DomainError;

    fn try_from(rec: CotRecord) -> Result<Self, DomainError> {
        let cot = ChainOfThought::new(rec.question_id, rec.steps, rec.gen_meta)?;
        if let Some(declared) = rec.final_answer {
            if cot.final_answer != Some(declared) {
                return Err(DomainError::InconsistentFinalAnswer {
                    declared: declared.letter(),
                    parsed: cot.final_answer.map(AnswerLabel::letter),
                });
            }
        }
        Ok(cot)
    }
}

impl From<ChainOfThought> for CotRecord {
    fn from(cot: ChainOfThought) -> CotRecord {
        CotRecord {
            question_id: cot.question_id,
            steps: cot.steps,
            final_answer: cot.final_answer,
            gen_meta: cot.gen_meta,
        }
    }
}

// ---------------------------------------------------------------------------
// Rewards and labels
// ---------------------------------------------------------------------------

/// Per-step PRM scores, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RewardVector {
    scores: Vec<f64>,
}

impl RewardVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, DomainError> {
        for &s in &scores {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(DomainError::ScoreOutOfRange(s));
            }
        }
        Ok(RewardVector { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl TryFrom<Vec<f64>> for RewardVector {
    type Error = DomainError;

    fn try_from(scores: Vec<f64>) -> Result<Self, DomainError> {
        RewardVector::new(scores)
    }
}

impl From<RewardVector> for Vec<f64> {
    fn from(rv: RewardVector) -> Vec<f64> {
        rv.scores
    }
}

/// Index of the earliest BAD step in a `k`-step chain, or −1 when every step
/// is acceptable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FirstBadIndex(i64);

impl FirstBadIndex {
    pub const ALL_GOOD: FirstBadIndex = FirstBadIndex(-1);

    pub fn new(value: i64, k: usize) -> Result<Self, DomainError> {
        if value == -1 || (value >= 0 && (value as usize) < k) {
            Ok(FirstBadIndex(value))
        } else {
            Err(DomainError::FirstBadOutOfRange { value, k })
        }
    }

    pub fn value(self) -> i64 {
        self.0
    }

    pub fn is_all_good(self) -> bool {
        self.0 == -1
    }

    /// The bad step's index when one exists.
    pub fn bad_index(self) -> Option<usize> {
        (self.0 >= 0).then_some(self.0 as usize)
    }
}

/// A chain of thought with binary step labels: a prefix of +1s followed by at
/// most one trailing −1 (steps after an error are discarded upstream).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCoT {
    cot: ChainOfThought,
    labels: Vec<i8>,
}

impl LabeledCoT {
    pub fn new(cot: ChainOfThought, labels: Vec<i8>) -> Result<Self, DomainError> {
        if labels.len() != cot.k() {
            return Err(DomainError::LabelLengthMismatch {
                labels: labels.len(),
                steps: cot.k(),
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            let valid = l == 1 || (l == -1 && i == labels.len() - 1);
            if !valid {
                return Err(DomainError::LabelSequenceInvalid);
            }
        }
        Ok(LabeledCoT { cot, labels })
    }

    pub fn cot(&self) -> &ChainOfThought {
        &self.cot
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    /// Target PRM score per step: +1 ↦ 1.0, −1 ↦ 0.0.
    pub fn target_scores(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| if l == 1 { 1.0 } else { 0.0 })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Parsing operations
// ---------------------------------------------------------------------------

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:the answer is)\s*\(([A-J])\)").expect("valid regex"))
}

/// Extracts the final answer from generated text.
///
/// The LAST occurrence of `the answer is (X)` wins (generators sometimes
/// restate); the phrase matches case-insensitively, the letter X ∈ A..J
/// case-sensitively. Trailing periods and surrounding whitespace are
/// tolerated. Absence is a valid result, not an error.
pub fn parse_final_answer(text: &str) -> Option<AnswerLabel> {
    answer_regex()
        .captures_iter(text)
        .last()
        .map(|cap| {
            let letter = cap[1].chars().next().expect("single-letter group");
            AnswerLabel::from_letter(letter).expect("regex guarantees A..J")
        })
}

/// The canonical final-step phrasing that [`parse_final_answer`] recognizes.
pub fn final_answer_sentence(label: AnswerLabel) -> String {
    format!("the answer is ({})", label.letter())
}

fn step_delimiter_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n{2,}").expect("valid regex"))
}

/// Splits text into steps on runs of two or more newlines, trimming each
/// fragment and dropping empty ones.
pub fn split_steps(text: &str) -> Result<Vec<Step>, DomainError> {
    let steps: Vec<Step> = step_delimiter_regex()
        .split(text)
        .filter(|frag| !frag.trim().is_empty())
        .map(Step::new)
        .collect::<Result<_, _>>()?;
    if steps.is_empty() {
        return Err(DomainError::EmptyCot);
    }
    Ok(steps)
}

/// Approximate token count: whitespace-delimited words × 1.3, rounded up.
///
/// Deliberately tokenizer-free; callers needing a real tokenizer supply
/// their own counter to [`validate_cot_with`].
pub fn approx_token_count(text: &str) -> usize {
    (text.split_whitespace().count() as f64 * 1.3).ceil() as usize
}

/// Keep/drop verdict for a sampled chain of thought.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationVerdict {
    Keep,
    DropOverlong,
    DropUnparsable,
}

/// [`validate_cot_with`] using the default approximate token counter.
pub fn validate_cot(cot: &ChainOfThought, max_tokens: usize) -> ValidationVerdict {
    validate_cot_with(cot, max_tokens, approx_token_count)
}

/// Drops chains whose concatenated steps exceed `max_tokens` under `counter`,
/// then chains whose last step parses no final answer; keeps the rest.
pub fn validate_cot_with(
    cot: &ChainOfThought,
    max_tokens: usize,
    counter: impl Fn(&str) -> usize,
) -> ValidationVerdict {
    if counter(&cot.joined_text()) > max_tokens {
        ValidationVerdict::DropOverlong
    } else if cot.final_answer().is_none() {
        ValidationVerdict::DropUnparsable
    } else {
        ValidationVerdict::Keep
    }
}

// ---------------------------------------------------------------------------
// JSONL pools
// ---------------------------------------------------------------------------

/// Reads a CoT pool (one JSON object per line) with line-addressed errors.
pub fn read_cot_pool<R: BufRead>(reader: R) -> Result<Vec<ChainOfThought>, JsonlError> {
    read_jsonl(reader)
}

/// Writes a CoT pool as JSONL with LF line endings.
pub fn write_cot_pool<W: Write>(writer: W, cots: &[ChainOfThought]) -> io::Result<()> {
    write_jsonl(writer, cots)
}

pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<Question>, JsonlError> {
    read_jsonl(reader)
}

pub fn write_questions<W: Write>(writer: W, questions: &[Question]) -> io::Result<()> {
    write_jsonl(writer, questions)
}

/// Generic line-numbered JSONL reader used by every dataset loader.
pub fn read_jsonl<R: BufRead, T: serde::de::DeserializeOwned>(
    reader: R,
) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Generic JSONL writer: one compact JSON object per line, LF endings.
pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> io::Result<()> {
    for item in items {
        let line = serde_json::to_string(item).map_err(io::Error::other)?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
