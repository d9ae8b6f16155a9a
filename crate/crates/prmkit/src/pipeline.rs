//! Synthetic reasoning-data machinery: prompt builders, auto-label parsing,
//! label conversion, augmentation, self-filtering, and training-record
//! export.
//!
//! Every builder here is a pure function from inputs to a [`PromptBundle`];
//! every parser is the inverse of a documented output format. Writers
//! (`render_*`) produce well-formed model replies for the mock flows and are
//! the round-trip partners of the parsers.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use rand::seq::index::sample;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::domain::{
    read_jsonl, write_jsonl, ChainOfThought, DomainError, FirstBadIndex, GenMeta, JsonlError,
    LabeledCoT, Question, RewardVector, Step,
};
use crate::seeding::derive_rng;

/// Classification token appended after every reasoning step in training
/// records: exactly four newline characters.
pub const CLASSIFICATION_TOKEN: &str = "\n\n\n\n";

/// Default number of CoTs sampled per question.
pub const DEFAULT_COTS_PER_QUESTION: usize = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("at most 5 few-shot examples are supported, got {got}")]
    TooManyFewshot { got: usize },
    #[error("no \\boxed{{...}} integer index in labeler output")]
    NoBoxedIndex,
    #[error("labeled index {value} out of range for a {k}-step chain")]
    IndexOutOfRange { value: i64, k: usize },
    #[error("counterfactual augmentation requires a fully correct chain")]
    CotNotFullyCorrect,
    #[error("the two counterfactual error types must be distinct")]
    ErrorTypesNotDistinct,
    #[error("missing {0} section in model output")]
    MissingSection(&'static str),
    #[error("STEP_NUM {value} out of range for a {k}-step chain")]
    StepNumOutOfRange { value: i64, k: usize },
    #[error("unknown error type {0:?}")]
    UnknownErrorType(String),
    #[error("missing <rewritten_step> tags in model output")]
    MissingTags,
    #[error("rewritten step is empty")]
    EmptyRewrite,
    #[error("reward vector length {scores} does not match {steps} steps")]
    LengthMismatch { steps: usize, scores: usize },
    #[error("no [GOOD] or [BAD] marker in grader output")]
    NoGradeMarker,
    #[error("grader input {0} is empty")]
    EmptyGraderInput(&'static str),
    #[error("no question with id {0:?} in the lookup set")]
    UnknownQuestion(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

// ---------------------------------------------------------------------------
// Prompt bundles and templates
// ---------------------------------------------------------------------------

/// A fully substituted prompt: optional system message plus a user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    system: Option<String>,
    user: String,
}

impl PromptBundle {
    fn new(system: Option<String>, user: String) -> Self {
        assert!(!user.is_empty(), "user prompt must be non-empty");
        PromptBundle { system, user }
    }

    /// Assembles a bundle from already-substituted parts.
    pub fn raw(system: Option<String>, user: String) -> Self {
        PromptBundle::new(system, user)
    }

    pub fn system(&self) -> Option<&str> {
        self.system.as_deref()
    }

    pub fn user(&self) -> &str {
        &self.user
    }
}

/// Replaces `{name}` placeholders. Every listed placeholder must occur in the
/// template; literal braces that are not listed pass through untouched.
fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (name, value) in pairs {
        let token = format!("{{{name}}}");
        assert!(out.contains(&token), "template lacks placeholder {name}");
        out = out.replace(&token, value);
    }
    out
}

const COT_GEN_INSTRUCTION: &str = "The following are multiple choice questions (with answers). Think step by step and then finish your answer with \"the answer is (X)\" where X is the correct letter choice.";

const AUTOLABEL_CRITERIA: &str = r#"You are an experienced evaluator specializing in assessing the quality of reasoning steps in problem-solving. Your task is to find the first BAD step in a student's solution to a multiple choice question.

You will judge steps as GOOD, OK or BAD based on the following criteria:
1. GOOD Step
A step is classified as GOOD if it meets all of these criteria:
- Correct: Everything stated is accurate and aligns with known principles or the given problem.
- Verifiable: The step can be verified using common knowledge, simple calculations, or a quick reference (e.g., recalling a basic theorem). If verifying requires extensive effort (e.g., detailed calculations or obscure references), mark it BAD instead.
- Appropriate: The step fits logically within the context of the preceding steps. If a prior mistake exists, a GOOD step can correct it.
- Insightful: The step demonstrates reasonable problem-solving direction. Even if ultimately progress in the wrong direction, it is acceptable as long as it represents a logical approach.

2. OK Step
A step is classified as OK if it is:
- Correct and Verifiable: Contains no errors and can be verified.
- Unnecessary or Redundant: Adds little value, such as restating prior information or providing basic encouragement (e.g., "Good job!").
- Partially Progressing: Makes some progress toward the solution but lacks decisive or significant advancement.

3. BAD Step
A step is classified as BAD if it:
- Is Incorrect: Contains factual errors, misapplies concepts, derives an incorrect result, or contradicts the ground truth answer.
- Is Hard to Verify: Requires significant effort to confirm due to poor explanation.
- Is Off-Topic: Includes irrelevant or nonsensical information.
- Derails: Leads to dead ends, circular reasoning, or unreasonable approaches.

#### Task Description
You will be provided with:"#;

const AUTOLABEL_CLOSING: &str = r#"Once you identify a BAD step, return the index of the earliest BAD step. Otherwise, return the index of -1 (which denotes all steps are GOOD or OK).
Please put your final answer (i.e., the index) in \boxed{}."#;

fn autolabel_system_prompt() -> String {
    format!(
        r#"{AUTOLABEL_CRITERIA}
1. A Question
2. A Ground Truth Answer
3. A Reference explanation of the answer
4. A Student's Step-by-Step Solution, where each step is enclosed with tags and indexed from 0

You may use the ground truth answer and reference explanation in classifying the type of each step.
A student's final answer is considered correct if it matches the ground truth answer or only differs due to differences in how the answer is rounded.
{AUTOLABEL_CLOSING}"#
    )
}

fn autolabel_system_prompt_ablated() -> String {
    format!(
        r#"{AUTOLABEL_CRITERIA}
1. A Question
2. A Ground Truth Answer

{AUTOLABEL_CLOSING}"#
    )
}

const COUNTERFACTUAL_SYSTEM: &str = r#"You are a highly knowledgeable philosopher with expertise across many domains, tasked with analyzing reasoning processes. Your goal is to identify how a reasoning process could naturally deviate toward an incorrect conclusion through the introduction of subtle errors.

Here are a list of potential error types, all of which are equally valid:
{error_type_1}: {error_type_1_definition}
{error_type_2}: {error_type_2_definition}

Instructions:
You will be provided with:
1. A question.
2. A complete chain of reasoning steps, where each step is numbered (e.g., Step X).

Your task is to:
1. Identify the major factual information, reasoning, and conclusions within the reasoning steps.
3. Explain how to generate an incorrect step to replace one of the existing steps. This should include:
   - Identifying a step where the reasoning could naturally deviate.
   - Speculating what type of error would be most appropriate to introduce at the chosen step.
4. Introduce an incorrect next step that aligns stylistically with the previous steps. This incorrect step should:
   - Reflect a deviation in reasoning that significantly harms the correctness.
   - Appear natural and believable in the context of the reasoning process.
5. Clearly explain how the incorrect step is an error, highlighting the specific logical or conceptual flaw.

Output Format:

STEP_SUMMARY:
[Summarize the reasoning within the steps in 1-2 sentences, identifying major information, logical steps, and conclusions.]

INCORRECT_STEP_GEN:
[Explain how the reasoning at a specific step could deviate naturally into being incorrect. Clearly describe the type of error that could be introduced at this step.]

ERROR_TYPE:
[The name of the type of error chosen to be introduced.]

STEP_NUM:
[The number of the step that was identified as a place where the reasoning could naturally deviate. Only include the number here.]

INCORRECT_STEP:
[Write the incorrect step in the same tone and style as the other steps. Wrap the incorrect step inside curly braces (e.g. {incorrect step}).]

ERROR_EXPLANATION:
[Explain how the incorrect step fits the definition of the selected error type, identifying the specific flaw.]"#;

const REWRITE_TEMPLATE: &str = r#"You will be given a reasoning step from a larger chain of thought. Your task is to rewrite this step using different phrasing, while keeping the underlying reasoning and deduction the same.

The rewritten step must:

- Preserve the same logical content and conclusion

- Match the tone and level of formality of the original

- Use different wording and phrasing, not just minor edits or clause reordering

Do not introduce new information or omit key reasoning.

Format your output as:

<rewritten_step>your rewritten version here</rewritten_step>

### Original Step:

{step}"#;

const OPEN_COT_TEMPLATE: &str = r#"Given the following question, respond with the best possible answer.

{question}

Your response should end with "Final Response: [your answer]", where [response to the question] should be replaced with your actual response. Each reasoning step should be separated by two newline characters.

Let's think step by step."#;

const GRADER_TEMPLATE: &str = r#"Given the following open-ended question, reference answer, and student response, evaluate the student's response for correctness.

Question: {question}

Reference Correct Response: {reference}

Student Response: {student}

Provide a step-by-step analysis of the student's response using the reference answer as a guide. Your response should end with [GOOD] if you believe the students response to be correct and valid with respect to the question and [BAD] otherwise.

Let's think step by step."#;

const REFINEMENT_TEMPLATE: &str = r#"Given the following question and answer choices:

{question}

Below is a previously generated chain-of-thought reasoning for this question. Each step in the reasoning has an associated score (between 0 and 1), provided by a reward model predicting the correctness of that step:

{cot_and_scores}

Re-examine and reconsider each step carefully. As you rethink the reasoning process, explicitly use the provided scores as indicators to identify potentially correct or incorrect reasoning steps. Clarify your reasoning and adjust it accordingly based on these scores.

Clearly separate each reasoning step by two newline characters.

After thoroughly reconsidering the reasoning process, select the best answer choice.

Conclude your response clearly with: "The answer is (X).", where X is the letter corresponding to your chosen answer.

Let's think step by step."#;

// ---------------------------------------------------------------------------
// Error taxonomy for counterfactual augmentation
// ---------------------------------------------------------------------------

/// The five fine-grained error kinds injectable by counterfactual
/// augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorType {
    ConflictingSteps,
    NonSequitur,
    Factual,
    FalseAssumption,
    Contextual,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::ConflictingSteps,
        ErrorType::NonSequitur,
        ErrorType::Factual,
        ErrorType::FalseAssumption,
        ErrorType::Contextual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::ConflictingSteps => "Conflicting Steps",
            ErrorType::NonSequitur => "Non-sequitur",
            ErrorType::Factual => "Factual",
            ErrorType::FalseAssumption => "False Assumption",
            ErrorType::Contextual => "Contextual",
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            ErrorType::ConflictingSteps => {
                "The reasoning step includes statements that contradict previous steps."
            }
            ErrorType::NonSequitur => {
                "The reasoning step introduces information that is irrelevant to the question."
            }
            ErrorType::Factual => {
                "The reasoning step contains incorrect statements of factual information."
            }
            ErrorType::FalseAssumption => {
                "The reasoning step makes an incorrect assumption about the question."
            }
            ErrorType::Contextual => {
                "The reasoning step misinterprets information given within the question/context."
            }
        }
    }

    /// Case-insensitive match on the display name, tolerating surrounding
    /// whitespace and a trailing period.
    pub fn parse_name(text: &str) -> Result<Self, PipelineError> {
        let cleaned = text.trim().trim_end_matches('.').trim();
        ErrorType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(cleaned))
            .ok_or_else(|| PipelineError::UnknownErrorType(text.trim().to_owned()))
    }
}

// ---------------------------------------------------------------------------
// Prompt builders
// ---------------------------------------------------------------------------

fn question_block(question: &Question) -> String {
    let mut out = format!("Question: {}\nOptions:\n", question.text());
    for (label, body) in question.options() {
        out.push_str(&format!("{}. {}\n", label.letter(), body));
    }
    out
}

/// Builds the few-shot CoT generation prompt: the fixed instruction, zero to
/// five worked examples with steps joined by blank lines, and the target
/// question awaiting its answer.
pub fn build_cot_generation_prompt(
    question: &Question,
    fewshot: &[(Question, ChainOfThought)],
) -> Result<PromptBundle, PipelineError> {
    if fewshot.len() > 5 {
        return Err(PipelineError::TooManyFewshot { got: fewshot.len() });
    }
    let mut user = String::from(COT_GEN_INSTRUCTION);
    user.push_str("\n\n");
    for (q, cot) in fewshot {
        user.push_str(&question_block(q));
        user.push_str("Answer: ");
        user.push_str(&cot.joined_text());
        user.push_str("\n\n");
    }
    user.push_str(&question_block(question));
    user.push_str("Answer:");
    Ok(PromptBundle::new(None, user))
}

fn tagged_steps(steps: &[Step]) -> String {
    let blocks: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("<step_{i}>\n{}\n</step_{i}>", s.text()))
        .collect();
    blocks.join("\n\n")
}

/// Builds the auto-labeling prompt. With ground truth, the system message
/// carries the full GOOD/OK/BAD rubric plus the reference-explanation task
/// item, and the user message includes the answer (and explanation when
/// available). The ablated variant drops all of those.
pub fn build_autolabel_prompt(
    question: &Question,
    cot: &ChainOfThought,
    include_ground_truth: bool,
) -> PromptBundle {
    let system = if include_ground_truth {
        autolabel_system_prompt()
    } else {
        autolabel_system_prompt_ablated()
    };

    let mut user = String::new();
    if include_ground_truth {
        user.push_str("The following is a multiple choice question and its ground truth answer. You are also given a students solution (split into step, enclosed with tags and indexed from 0):\n\n");
    } else {
        user.push_str("The following is a multiple choice question. You are also given a students solution (split into step, enclosed with tags and indexed from 0):\n\n");
    }
    user.push_str("[Multiple Choice Question]\n\n");
    user.push_str(&question.rendered_with_options());
    user.push_str("\n\n");
    if include_ground_truth {
        let truth = question.truth();
        let body = question
            .options()
            .iter()
            .find(|(l, _)| *l == truth)
            .map(|(_, b)| b.as_str())
            .unwrap_or("");
        user.push_str("[Ground Truth Answer]\n\n");
        user.push_str(&format!("({}) {}\n\n", truth.letter(), body));
        if let Some(explanation) = question.reference_explanation() {
            user.push_str("[Reference Explanation]\n\n");
            user.push_str(explanation);
            user.push_str("\n\n");
        }
    }
    user.push_str("[Student Solution]\n\n");
    user.push_str(&tagged_steps(cot.steps()));
    PromptBundle::new(Some(system), user)
}

fn boxed_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{([^{}]*)\}").expect("valid regex"))
}

/// Extracts the labeler's verdict: the last `\boxed{...}` whose content
/// parses as an integer, validated against the chain length.
pub fn parse_autolabel_output(text: &str, k: usize) -> Result<FirstBadIndex, PipelineError> {
    let value = boxed_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].trim().parse::<i64>().ok())
        .last()
        .ok_or(PipelineError::NoBoxedIndex)?;
    FirstBadIndex::new(value, k).map_err(|_| PipelineError::IndexOutOfRange { value, k })
}

/// Converts a first-bad verdict into binary step labels: all good keeps every
/// step at +1; otherwise the chain is truncated after the bad step, which is
/// labeled −1.
pub fn apply_step_labels(
    cot: &ChainOfThought,
    first_bad: FirstBadIndex,
) -> Result<LabeledCoT, PipelineError> {
    match first_bad.bad_index() {
        None => {
            let labels = vec![1i8; cot.k()];
            Ok(LabeledCoT::new(cot.clone(), labels)?)
        }
        Some(idx) => {
            if idx >= cot.k() {
                return Err(PipelineError::IndexOutOfRange {
                    value: idx as i64,
                    k: cot.k(),
                });
            }
            let truncated = cot.truncated(idx + 1)?;
            let mut labels = vec![1i8; idx];
            labels.push(-1);
            Ok(LabeledCoT::new(truncated, labels)?)
        }
    }
}

/// Draws two distinct error types uniformly from the seeded stream.
pub fn sample_error_types(seed: u64) -> (ErrorType, ErrorType) {
    let mut rng = derive_rng(seed, &[crate::seeding::hash_str("counterfactual-types")]);
    let picked = sample(&mut rng, ErrorType::ALL.len(), 2);
    (ErrorType::ALL[picked.index(0)], ErrorType::ALL[picked.index(1)])
}

fn numbered_steps(steps: &[Step]) -> String {
    let blocks: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {i}: {}", s.text()))
        .collect();
    blocks.join("\n\n")
}

/// Builds the counterfactual-augmentation prompt over a fully correct chain.
/// When `types` is None, two distinct error types are drawn from `seed`.
pub fn build_counterfactual_prompt(
    question: &Question,
    labeled: &LabeledCoT,
    types: Option<(ErrorType, ErrorType)>,
    seed: u64,
) -> Result<PromptBundle, PipelineError> {
    if labeled.labels().iter().any(|&l| l != 1) {
        return Err(PipelineError::CotNotFullyCorrect);
    }
    let (first, second) = match types {
        Some((a, b)) if a == b => return Err(PipelineError::ErrorTypesNotDistinct),
        Some(pair) => pair,
        None => sample_error_types(seed),
    };
    let system = fill(
        COUNTERFACTUAL_SYSTEM,
        &[
            ("error_type_1", first.name()),
            ("error_type_1_definition", first.definition()),
            ("error_type_2", second.name()),
            ("error_type_2_definition", second.definition()),
        ],
    );
    let user = format!(
        "[Question]\n\n{}\n\n[Reasoning Steps]\n\n{}",
        question.rendered_with_options(),
        numbered_steps(labeled.cot().steps())
    );
    Ok(PromptBundle::new(Some(system), user))
}

const COUNTERFACTUAL_HEADERS: [&str; 6] = [
    "STEP_SUMMARY:",
    "INCORRECT_STEP_GEN:",
    "ERROR_TYPE:",
    "STEP_NUM:",
    "INCORRECT_STEP:",
    "ERROR_EXPLANATION:",
];

fn section<'a>(text: &'a str, header: &'static str) -> Option<&'a str> {
    let start = text.find(header)? + header.len();
    let rest = &text[start..];
    let end = COUNTERFACTUAL_HEADERS
        .iter()
        .filter(|h| **h != header)
        .filter_map(|h| rest.find(h))
        .min()
        .unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn first_int(text: &str) -> Option<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+").expect("valid regex"));
    re.find(text)?.as_str().parse().ok()
}

/// Extracts the content of the outermost balanced `{...}` pair in `text`.
fn braced_content(text: &str) -> Option<&str> {
    let open = text.find('{')?;
    let mut depth = 0usize;
    for (i, ch) in text[open..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[open + 1..open + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a counterfactual reply into its structured parts: the chosen step
/// number, the error type, and the injected incorrect step.
pub fn parse_counterfactual_output(
    text: &str,
    k: usize,
) -> Result<(usize, ErrorType, Step), PipelineError> {
    let type_section =
        section(text, "ERROR_TYPE:").ok_or(PipelineError::MissingSection("ERROR_TYPE"))?;
    let error_type = ErrorType::parse_name(type_section)?;

    let num_section =
        section(text, "STEP_NUM:").ok_or(PipelineError::MissingSection("STEP_NUM"))?;
    let value = first_int(num_section).ok_or(PipelineError::MissingSection("STEP_NUM"))?;
    if value < 0 || value as usize >= k {
        return Err(PipelineError::StepNumOutOfRange { value, k });
    }

    let step_section =
        section(text, "INCORRECT_STEP:").ok_or(PipelineError::MissingSection("INCORRECT_STEP"))?;
    let body =
        braced_content(step_section).ok_or(PipelineError::MissingSection("INCORRECT_STEP"))?;
    let step = Step::new(body)?;
    Ok((value as usize, error_type, step))
}

/// Renders a well-formed counterfactual reply; the round-trip partner of
/// [`parse_counterfactual_output`]. Used by the mock augmentation flow.
pub fn render_counterfactual_output(
    step_num: usize,
    error_type: ErrorType,
    incorrect_step: &Step,
) -> String {
    format!(
        "STEP_SUMMARY:\nThe chain reasons toward its recorded conclusion.\n\n\
         INCORRECT_STEP_GEN:\nStep {step_num} can drift into a {} error while keeping the surrounding style.\n\n\
         ERROR_TYPE:\n{}\n\n\
         STEP_NUM:\n{step_num}\n\n\
         INCORRECT_STEP:\n{{{}}}\n\n\
         ERROR_EXPLANATION:\nThe injected step fits the selected error type by construction.",
        error_type.name(),
        error_type.name(),
        incorrect_step.text()
    )
}

/// Stores a counterfactual result as a new labeled chain: the kept prefix is
/// labeled +1 and the injected step −1, mirroring the truncation rule.
pub fn apply_counterfactual(
    original: &ChainOfThought,
    step_num: usize,
    incorrect_step: Step,
) -> Result<LabeledCoT, PipelineError> {
    if step_num >= original.k() {
        return Err(PipelineError::StepNumOutOfRange {
            value: step_num as i64,
            k: original.k(),
        });
    }
    let mut steps: Vec<Step> = original.steps()[..step_num].to_vec();
    steps.push(incorrect_step);
    let cot = ChainOfThought::new(original.question_id(), steps, original.gen_meta().clone())?;
    let mut labels = vec![1i8; step_num];
    labels.push(-1);
    Ok(LabeledCoT::new(cot, labels)?)
}

/// Builds the rewrite-augmentation prompt around one original step.
pub fn build_rewrite_prompt(step: &Step) -> PromptBundle {
    PromptBundle::new(None, fill(REWRITE_TEMPLATE, &[("step", step.text())]))
}

/// Extracts the rewritten step from between its tags.
pub fn parse_rewrite_output(text: &str) -> Result<Step, PipelineError> {
    const OPEN: &str = "<rewritten_step>";
    const CLOSE: &str = "</rewritten_step>";
    let start = text.find(OPEN).ok_or(PipelineError::MissingTags)? + OPEN.len();
    let end = text[start..]
        .find(CLOSE)
        .ok_or(PipelineError::MissingTags)?;
    let body = text[start..start + end].trim();
    if body.is_empty() {
        return Err(PipelineError::EmptyRewrite);
    }
    Ok(Step::new(body)?)
}

/// Renders a well-formed rewrite reply; round-trip partner of
/// [`parse_rewrite_output`].
pub fn render_rewrite_output(step: &Step) -> String {
    format!("<rewritten_step>{}</rewritten_step>", step.text())
}

/// Renders a well-formed labeler reply; round-trip partner of
/// [`parse_autolabel_output`].
pub fn render_autolabel_output(first_bad: FirstBadIndex) -> String {
    format!(
        "The earliest BAD step evaluates to \\boxed{{{}}}.",
        first_bad.value()
    )
}

/// Replaces one step with its rewrite; labels are inherited unchanged
/// (the rewrite preserves meaning, so correctness is unaffected).
pub fn apply_rewrite(
    original: &LabeledCoT,
    step_index: usize,
    rewritten: Step,
) -> Result<LabeledCoT, PipelineError> {
    if step_index >= original.cot().k() {
        return Err(PipelineError::IndexOutOfRange {
            value: step_index as i64,
            k: original.cot().k(),
        });
    }
    let mut steps = original.cot().steps().to_vec();
    steps[step_index] = rewritten;
    let cot = ChainOfThought::new(
        original.cot().question_id(),
        steps,
        original.cot().gen_meta().clone(),
    )?;
    Ok(LabeledCoT::new(cot, original.labels().to_vec())?)
}

// ---------------------------------------------------------------------------
// Self-filtering and judge scoring
// ---------------------------------------------------------------------------

/// Self-filter threshold: a chain is dropped when any step's predicted score
/// deviates from its label target by more than this.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfFilterConfig {
    pub threshold: f64,
}

impl Default for SelfFilterConfig {
    fn default() -> Self {
        SelfFilterConfig { threshold: 0.4 }
    }
}

impl SelfFilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(PipelineError::InvalidConfig(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Drops every chain containing a step whose predicted score deviates from
/// its autolabeled target (+1 -> 1.0, -1 -> 0.0) by more than the threshold.
/// Order is preserved.
pub fn self_filter(
    dataset: Vec<(LabeledCoT, RewardVector)>,
    cfg: &SelfFilterConfig,
) -> Result<Vec<LabeledCoT>, PipelineError> {
    cfg.validate()?;
    let mut kept = Vec::with_capacity(dataset.len());
    for (labeled, scores) in dataset {
        let targets = labeled.target_scores();
        if scores.len() != targets.len() {
            return Err(PipelineError::LengthMismatch {
                steps: targets.len(),
                scores: scores.len(),
            });
        }
        let deviates = scores
            .scores()
            .iter()
            .zip(&targets)
            .any(|(s, t)| (s - t).abs() > cfg.threshold);
        if !deviates {
            kept.push(labeled);
        }
    }
    Ok(kept)
}

/// Scores a chain from a first-bad verdict the way a judge-as-PRM does: ones
/// strictly before the identified step, zeros from it onward; all ones when
/// no step is bad.
pub fn judge_scores_from_first_bad(
    k: usize,
    first_bad: FirstBadIndex,
) -> Result<RewardVector, PipelineError> {
    let scores = match first_bad.bad_index() {
        None => vec![1.0; k],
        Some(idx) => {
            if idx >= k {
                return Err(PipelineError::IndexOutOfRange {
                    value: idx as i64,
                    k,
                });
            }
            (0..k).map(|i| if i < idx { 1.0 } else { 0.0 }).collect()
        }
    };
    Ok(RewardVector::new(scores)?)
}

// ---------------------------------------------------------------------------
// Training-record export
// ---------------------------------------------------------------------------

/// Per-step classification target: `+` marks a correct step, `-` an
/// incorrect one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetToken {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

#[derive(Serialize, Deserialize)]
struct TrainingRecordRaw {
    text: String,
    targets: Vec<TargetToken>,
}

/// One PRM training example: the question and steps flattened to text with a
/// classification token after each step, plus the aligned +/- targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TrainingRecordRaw", into = "TrainingRecordRaw")]
pub struct TrainingRecord {
    text: String,
    targets: Vec<TargetToken>,
}

impl TrainingRecord {
    pub fn new(text: String, targets: Vec<TargetToken>) -> Result<Self, PipelineError> {
        let occurrences = text.matches(CLASSIFICATION_TOKEN).count();
        if occurrences != targets.len() {
            return Err(PipelineError::LengthMismatch {
                steps: occurrences,
                scores: targets.len(),
            });
        }
        Ok(TrainingRecord { text, targets })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn targets(&self) -> &[TargetToken] {
        &self.targets
    }
}

impl TryFrom<TrainingRecordRaw> for TrainingRecord {
    type Error = PipelineError;

    fn try_from(raw: TrainingRecordRaw) -> Result<Self, PipelineError> {
        TrainingRecord::new(raw.text, raw.targets)
    }
}

impl From<TrainingRecord> for TrainingRecordRaw {
    fn from(r: TrainingRecord) -> TrainingRecordRaw {
        TrainingRecordRaw {
            text: r.text,
            targets: r.targets,
        }
    }
}

/// Collapses runs of three or more newlines to two, so question text can
/// never collide with the four-newline classification token.
fn sanitize_newline_runs(text: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\n{3,}").expect("valid regex"));
    re.replace_all(text, "\n\n").into_owned()
}

/// Flattens labeled chains into training records: question text, then each
/// step suffixed by the classification token; targets follow the labels.
pub fn export_training_records(
    dataset: &[LabeledCoT],
    questions: &BTreeMap<String, Question>,
) -> Result<Vec<TrainingRecord>, PipelineError> {
    let mut records = Vec::with_capacity(dataset.len());
    for labeled in dataset {
        let qid = labeled.cot().question_id();
        let question = questions
            .get(qid)
            .ok_or_else(|| PipelineError::UnknownQuestion(qid.to_owned()))?;
        let mut text = sanitize_newline_runs(&question.rendered_with_options());
        text.push('\n');
        for step in labeled.cot().steps() {
            text.push_str(step.text());
            text.push_str(CLASSIFICATION_TOKEN);
        }
        let targets = labeled
            .labels()
            .iter()
            .map(|&l| if l == 1 { TargetToken::Plus } else { TargetToken::Minus })
            .collect();
        records.push(TrainingRecord::new(text, targets)?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Refinement and open-ended grading prompts
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScoredCotRaw {
    #[serde(flatten)]
    cot: ChainOfThought,
    rewards: Vec<f64>,
}

/// A chain of thought paired with its aligned per-step PRM scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoredCotRaw", into = "ScoredCotRaw")]
pub struct ScoredCoT {
    cot: ChainOfThought,
    rewards: RewardVector,
}

impl ScoredCoT {
    pub fn new(cot: ChainOfThought, rewards: RewardVector) -> Result<Self, PipelineError> {
        if rewards.len() != cot.k() {
            return Err(PipelineError::LengthMismatch {
                steps: cot.k(),
                scores: rewards.len(),
            });
        }
        Ok(ScoredCoT { cot, rewards })
    }

    pub fn cot(&self) -> &ChainOfThought {
        &self.cot
    }

    pub fn rewards(&self) -> &RewardVector {
        &self.rewards
    }

    pub fn into_parts(self) -> (ChainOfThought, RewardVector) {
        (self.cot, self.rewards)
    }
}

impl TryFrom<ScoredCotRaw> for ScoredCoT {
    type Error = PipelineError;

    fn try_from(raw: ScoredCotRaw) -> Result<Self, PipelineError> {
        ScoredCoT::new(raw.cot, RewardVector::new(raw.rewards)?)
    }
}

impl From<ScoredCoT> for ScoredCotRaw {
    fn from(s: ScoredCoT) -> ScoredCotRaw {
        ScoredCotRaw {
            cot: s.cot,
            rewards: s.rewards.scores().to_vec(),
        }
    }
}

/// Builds the iterative-refinement prompt: the question, then interleaved
/// `Step i:` / `Score i:` blocks, then the reconsideration instructions.
pub fn build_refinement_prompt(
    question: &Question,
    scored: &ScoredCoT,
) -> Result<PromptBundle, PipelineError> {
    let blocks: Vec<String> = scored
        .cot()
        .steps()
        .iter()
        .zip(scored.rewards().scores())
        .enumerate()
        .map(|(i, (step, score))| format!("Step {i}: {}\n\nScore {i}: {score}", step.text()))
        .collect();
    let user = fill(
        REFINEMENT_TEMPLATE,
        &[
            ("question", &question.rendered_with_options()),
            ("cot_and_scores", &blocks.join("\n\n")),
        ],
    );
    Ok(PromptBundle::new(None, user))
}

/// Builds the open-ended CoT generation prompt (no answer choices shown).
pub fn build_open_cot_prompt(question_text: &str) -> Result<PromptBundle, PipelineError> {
    if question_text.trim().is_empty() {
        return Err(PipelineError::EmptyGraderInput("question"));
    }
    Ok(PromptBundle::new(
        None,
        fill(OPEN_COT_TEMPLATE, &[("question", question_text)]),
    ))
}

/// Builds the grader prompt comparing a student response to the reference.
pub fn build_open_grader_prompt(
    question_text: &str,
    reference: &str,
    student: &str,
) -> Result<PromptBundle, PipelineError> {
    for (name, value) in [
        ("question", question_text),
        ("reference", reference),
        ("student", student),
    ] {
        if value.trim().is_empty() {
            return Err(PipelineError::EmptyGraderInput(match name {
                "question" => "question",
                "reference" => "reference",
                _ => "student",
            }));
        }
    }
    Ok(PromptBundle::new(
        None,
        fill(
            GRADER_TEMPLATE,
            &[
                ("question", question_text),
                ("reference", reference),
                ("student", student),
            ],
        ),
    ))
}

/// Grader verdict on an open-ended response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Good,
    Bad,
}

/// Reads the grader's verdict: whichever of `[GOOD]` / `[BAD]` appears last
/// wins.
pub fn parse_grade(text: &str) -> Result<Grade, PipelineError> {
    let good = text.rfind("[GOOD]");
    let bad = text.rfind("[BAD]");
    match (good, bad) {
        (None, None) => Err(PipelineError::NoGradeMarker),
        (Some(_), None) => Ok(Grade::Good),
        (None, Some(_)) => Ok(Grade::Bad),
        (Some(g), Some(b)) => Ok(if g > b { Grade::Good } else { Grade::Bad }),
    }
}

// ---------------------------------------------------------------------------
// Dataset entries and JSONL schemas
// ---------------------------------------------------------------------------

/// Provenance of a labeled chain in the training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CotSource {
    Generated,
    Counterfactual,
    Rewrite,
}

#[derive(Serialize, Deserialize)]
struct LabeledRecordRaw {
    question_id: String,
    steps: Vec<String>,
    labels: Vec<i8>,
    source: CotSource,
    meta: GenMeta,
}

/// One row of the labeled-dataset JSONL: a labeled chain plus its
/// provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabeledRecordRaw", into = "LabeledRecordRaw")]
pub struct LabeledEntry {
    labeled: LabeledCoT,
    source: CotSource,
}

impl LabeledEntry {
    pub fn new(labeled: LabeledCoT, source: CotSource) -> Self {
        LabeledEntry { labeled, source }
    }

    pub fn labeled(&self) -> &LabeledCoT {
        &self.labeled
    }

    pub fn source(&self) -> CotSource {
        self.source
    }

    pub fn into_labeled(self) -> LabeledCoT {
        self.labeled
    }
}

impl TryFrom<LabeledRecordRaw> for LabeledEntry {
    type Error = DomainError;

    fn try_from(raw: LabeledRecordRaw) -> Result<Self, DomainError> {
        let steps = raw
            .steps
            .into_iter()
            .map(Step::new)
            .collect::<Result<Vec<_>, _>>()?;
        let cot = ChainOfThought::new(raw.question_id, steps, raw.meta)?;
        Ok(LabeledEntry {
            labeled: LabeledCoT::new(cot, raw.labels)?,
            source: raw.source,
        })
    }
}

impl From<LabeledEntry> for LabeledRecordRaw {
    fn from(entry: LabeledEntry) -> LabeledRecordRaw {
        let cot = entry.labeled.cot();
        LabeledRecordRaw {
            question_id: cot.question_id().to_owned(),
            steps: cot.steps().iter().map(|s| s.text().to_owned()).collect(),
            labels: entry.labeled.labels().to_vec(),
            source: entry.source,
            meta: cot.gen_meta().clone(),
        }
    }
}

pub fn read_labeled_dataset<R: BufRead>(reader: R) -> Result<Vec<LabeledEntry>, JsonlError> {
    read_jsonl(reader)
}

pub fn write_labeled_dataset<W: Write>(writer: W, entries: &[LabeledEntry]) -> io::Result<()> {
    write_jsonl(writer, entries)
}

pub fn read_training_records<R: BufRead>(reader: R) -> Result<Vec<TrainingRecord>, JsonlError> {
    read_jsonl(reader)
}

pub fn write_training_records<W: Write>(
    writer: W,
    records: &[TrainingRecord],
) -> io::Result<()> {
    write_jsonl(writer, records)
}

pub fn read_scored_pool<R: BufRead>(reader: R) -> Result<Vec<ScoredCoT>, JsonlError> {
    read_jsonl(reader)
}

pub fn write_scored_pool<W: Write>(writer: W, pool: &[ScoredCoT]) -> io::Result<()> {
    write_jsonl(writer, pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AnswerLabel;
    use proptest::prelude::*;

    fn question() -> Question {
        Question::new(
            "q1",
            "Math",
            "What is 2 + 2?",
            vec![
                (AnswerLabel::from_letter('A').unwrap(), "3".to_owned()),
                (AnswerLabel::from_letter('B').unwrap(), "4".to_owned()),
                (AnswerLabel::from_letter('C').unwrap(), "5".to_owned()),
            ],
            AnswerLabel::from_letter('B').unwrap(),
            Some("Two plus two makes four.".to_owned()),
        )
        .unwrap()
    }

    fn cot(texts: &[&str]) -> ChainOfThought {
        let steps: Vec<Step> = texts.iter().map(|t| Step::new(*t).unwrap()).collect();
        ChainOfThought::new("q1", steps, GenMeta::mock(0)).unwrap()
    }

    fn correct_cot() -> ChainOfThought {
        cot(&["Add the twos.", "They make four.", "the answer is (B)"])
    }

    #[test]
    fn generation_prompt_contains_instruction_and_question() {
        let bundle = build_cot_generation_prompt(&question(), &[]).unwrap();
        assert!(bundle.system().is_none());
        assert!(bundle.user().contains("finish your answer with \"the answer is (X)\""));
        assert!(bundle.user().contains("What is 2 + 2?"));
        assert!(bundle.user().contains("A. 3"));
        assert!(bundle.user().contains("C. 5"));
        assert!(bundle.user().ends_with("Answer:"));
    }

    #[test]
    fn generation_prompt_renders_each_fewshot_block() {
        let shots = vec![(question(), correct_cot()); 5];
        let bundle = build_cot_generation_prompt(&question(), &shots).unwrap();
        assert_eq!(bundle.user().matches("Answer: ").count(), 5);
        // Few-shot steps are joined by a blank line.
        assert!(bundle.user().contains("Add the twos.\n\nThey make four."));
        let too_many = vec![(question(), correct_cot()); 6];
        assert!(matches!(
            build_cot_generation_prompt(&question(), &too_many),
            Err(PipelineError::TooManyFewshot { got: 6 })
        ));
    }

    #[test]
    fn autolabel_prompt_tags_steps_from_zero() {
        let c = cot(&["First.", "Second."]);
        let bundle = build_autolabel_prompt(&question(), &c, true);
        assert!(bundle.user().contains("<step_0>\nFirst.\n</step_0>"));
        assert!(bundle.user().contains("<step_1>\nSecond.\n</step_1>"));
        assert!(!bundle.user().contains("<step_2>"));
    }

    #[test]
    fn autolabel_system_prompt_carries_the_rubric() {
        let c = correct_cot();
        let bundle = build_autolabel_prompt(&question(), &c, true);
        let system = bundle.system().unwrap();
        assert!(system.contains("find the first BAD step"));
        assert!(system.contains("GOOD, OK or BAD"));
        assert!(system.contains("index of -1"));
        assert!(system.contains("A Reference explanation of the answer"));
        assert!(bundle.user().contains("[Ground Truth Answer]"));
        assert!(bundle.user().contains("(B) 4"));
        assert!(bundle.user().contains("Two plus two makes four."));
    }

    #[test]
    fn ablated_prompt_omits_the_reference_material() {
        let c = correct_cot();
        let bundle = build_autolabel_prompt(&question(), &c, false);
        let system = bundle.system().unwrap();
        assert!(system.contains("find the first BAD step"));
        assert!(!system.contains("Reference explanation"));
        assert!(!bundle.user().contains("[Ground Truth Answer]"));
        assert!(!bundle.user().contains("Two plus two makes four."));
    }

    #[test]
    fn autolabel_parse_takes_the_last_integer_box() {
        let fb = parse_autolabel_output("first \\boxed{2} then \\boxed{1}", 3).unwrap();
        assert_eq!(fb.bad_index(), Some(1));
        let fb = parse_autolabel_output("so the index is \\boxed{-1}", 4).unwrap();
        assert!(fb.is_all_good());
        // Non-integer boxes are skipped, not fatal.
        let fb = parse_autolabel_output("\\boxed{0} and \\boxed{x}", 2).unwrap();
        assert_eq!(fb.bad_index(), Some(0));
    }

    #[test]
    fn autolabel_parse_rejects_missing_or_out_of_range() {
        assert!(matches!(
            parse_autolabel_output("no verdict here", 3),
            Err(PipelineError::NoBoxedIndex)
        ));
        assert!(matches!(
            parse_autolabel_output("\\boxed{7}", 3),
            Err(PipelineError::IndexOutOfRange { value: 7, k: 3 })
        ));
        assert!(matches!(
            parse_autolabel_output("\\boxed{-2}", 3),
            Err(PipelineError::IndexOutOfRange { value: -2, k: 3 })
        ));
    }

    #[test]
    fn autolabel_render_round_trips() {
        for value in [-1i64, 0, 2] {
            let fb = FirstBadIndex::new(value, 3).unwrap();
            let parsed = parse_autolabel_output(&render_autolabel_output(fb), 3).unwrap();
            assert_eq!(parsed, fb);
        }
    }

    #[test]
    fn step_labels_follow_the_truncation_rule() {
        let c = cot(&["a", "b", "c", "d"]);
        let all_good = apply_step_labels(&c, FirstBadIndex::ALL_GOOD).unwrap();
        assert_eq!(all_good.labels(), &[1, 1, 1, 1]);
        assert_eq!(all_good.cot().k(), 4);

        let bad_at_1 = apply_step_labels(&c, FirstBadIndex::new(1, 4).unwrap()).unwrap();
        assert_eq!(bad_at_1.labels(), &[1, -1]);
        assert_eq!(bad_at_1.cot().k(), 2);

        let single = cot(&["only"]);
        let bad_at_0 = apply_step_labels(&single, FirstBadIndex::new(0, 1).unwrap()).unwrap();
        assert_eq!(bad_at_0.labels(), &[-1]);
    }

    proptest! {
        #[test]
        fn label_rule_is_exhaustive_for_small_k(k in 1usize..=6, offset in 0usize..7) {
            let texts: Vec<String> = (0..k).map(|i| format!("step {i}")).collect();
            let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
            let c = cot(&refs);
            // Sweep first_bad over {-1, 0, .., k-1} via the offset.
            let value = (offset as i64 % (k as i64 + 1)) - 1;
            let fb = FirstBadIndex::new(value, k).unwrap();
            let labeled = apply_step_labels(&c, fb).unwrap();
            let expected_len = if value == -1 { k } else { value as usize + 1 };
            prop_assert_eq!(labeled.labels().len(), expected_len);
            prop_assert_eq!(labeled.cot().k(), expected_len);

            // Judge scores agree with the labels on the shared prefix and
            // extend by zeros.
            let scores = judge_scores_from_first_bad(k, fb).unwrap();
            let targets = labeled.target_scores();
            for (i, t) in targets.iter().enumerate() {
                prop_assert_eq!(scores.scores()[i], *t);
            }
            for i in targets.len()..k {
                prop_assert_eq!(scores.scores()[i], 0.0);
            }
        }
    }

    #[test]
    fn judge_scores_match_the_rule() {
        let fb = FirstBadIndex::new(1, 4).unwrap();
        let scores = judge_scores_from_first_bad(4, fb).unwrap();
        assert_eq!(scores.scores(), &[1.0, 0.0, 0.0, 0.0]);
        let scores = judge_scores_from_first_bad(3, FirstBadIndex::ALL_GOOD).unwrap();
        assert_eq!(scores.scores(), &[1.0, 1.0, 1.0]);
        let scores = judge_scores_from_first_bad(1, FirstBadIndex::new(0, 1).unwrap()).unwrap();
        assert_eq!(scores.scores(), &[0.0]);
    }

    #[test]
    fn counterfactual_prompt_names_exactly_two_error_types() {
        let labeled = LabeledCoT::new(correct_cot(), vec![1, 1, 1]).unwrap();
        let bundle = build_counterfactual_prompt(
            &question(),
            &labeled,
            Some((ErrorType::Factual, ErrorType::Contextual)),
            0,
        )
        .unwrap();
        let system = bundle.system().unwrap();
        assert!(system.contains("Factual: The reasoning step contains incorrect statements"));
        assert!(system.contains("Contextual: The reasoning step misinterprets information"));
        for absent in ["Conflicting Steps", "Non-sequitur", "False Assumption"] {
            assert!(!system.contains(absent), "unexpected {absent}");
        }
        assert!(bundle.user().contains("Step 0: Add the twos."));
        assert!(bundle.user().contains("Step 2: the answer is (B)"));
    }

    #[test]
    fn counterfactual_prompt_requires_fully_correct_chain() {
        let labeled = LabeledCoT::new(cot(&["a", "b"]), vec![1, -1]).unwrap();
        assert!(matches!(
            build_counterfactual_prompt(&question(), &labeled, None, 0),
            Err(PipelineError::CotNotFullyCorrect)
        ));
        let ok = LabeledCoT::new(cot(&["a", "b"]), vec![1, 1]).unwrap();
        assert!(matches!(
            build_counterfactual_prompt(
                &question(),
                &ok,
                Some((ErrorType::Factual, ErrorType::Factual)),
                0
            ),
            Err(PipelineError::ErrorTypesNotDistinct)
        ));
    }

    #[test]
    fn sampled_error_types_are_deterministic_and_distinct() {
        let (a1, b1) = sample_error_types(42);
        let (a2, b2) = sample_error_types(42);
        assert_eq!((a1, b1), (a2, b2));
        assert_ne!(a1, b1);
        // Different seeds eventually produce a different pair.
        let mut saw_different = false;
        for seed in 0..32u64 {
            if sample_error_types(seed) != (a1, b1) {
                saw_different = true;
                break;
            }
        }
        assert!(saw_different);
    }

    #[test]
    fn counterfactual_output_round_trips() {
        let step = Step::new("Therefore the total is 5.").unwrap();
        let text = render_counterfactual_output(2, ErrorType::FalseAssumption, &step);
        let (num, kind, parsed) = parse_counterfactual_output(&text, 4).unwrap();
        assert_eq!(num, 2);
        assert_eq!(kind, ErrorType::FalseAssumption);
        assert_eq!(parsed, step);
    }

    #[test]
    fn counterfactual_parse_rejects_malformed_output() {
        let step = Step::new("x").unwrap();
        let good = render_counterfactual_output(1, ErrorType::Factual, &step);

        let no_step = good.replace("INCORRECT_STEP:", "INCORRECT_THING:");
        assert!(matches!(
            parse_counterfactual_output(&no_step, 3),
            Err(PipelineError::MissingSection("INCORRECT_STEP"))
        ));

        assert!(matches!(
            parse_counterfactual_output(&render_counterfactual_output(9, ErrorType::Factual, &step), 3),
            Err(PipelineError::StepNumOutOfRange { value: 9, k: 3 })
        ));

        let bad_type = good.replace("ERROR_TYPE:\nFactual", "ERROR_TYPE:\nWhimsical");
        assert!(matches!(
            parse_counterfactual_output(&bad_type, 3),
            Err(PipelineError::UnknownErrorType(_))
        ));
    }

    #[test]
    fn counterfactual_parse_handles_case_and_nested_braces() {
        let text = "ERROR_TYPE:\nfalse assumption.\n\nSTEP_NUM:\nStep 1\n\nINCORRECT_STEP:\n{Use {x} as the unknown.}";
        let (num, kind, step) = parse_counterfactual_output(text, 3).unwrap();
        assert_eq!(num, 1);
        assert_eq!(kind, ErrorType::FalseAssumption);
        assert_eq!(step.text(), "Use {x} as the unknown.");
    }

    #[test]
    fn counterfactual_application_relabels_the_tail() {
        let original = correct_cot();
        let injected = Step::new("They make five.").unwrap();
        let labeled = apply_counterfactual(&original, 1, injected.clone()).unwrap();
        assert_eq!(labeled.labels(), &[1, -1]);
        assert_eq!(labeled.cot().steps()[0], original.steps()[0]);
        assert_eq!(labeled.cot().steps()[1], injected);
        assert_eq!(labeled.cot().k(), 2);
    }

    #[test]
    fn rewrite_prompt_embeds_the_original_step() {
        let step = Step::new("Compute the sum of both terms.").unwrap();
        let bundle = build_rewrite_prompt(&step);
        assert!(bundle.user().contains("Compute the sum of both terms."));
        assert!(bundle.user().contains("Preserve the same logical content"));
        assert!(bundle.user().contains("<rewritten_step>"));
    }

    #[test]
    fn rewrite_output_parsing_and_round_trip() {
        let parsed =
            parse_rewrite_output("<rewritten_step>Thus X follows.</rewritten_step>").unwrap();
        assert_eq!(parsed.text(), "Thus X follows.");

        let step = Step::new("Sum the pair to get four.").unwrap();
        assert_eq!(parse_rewrite_output(&render_rewrite_output(&step)).unwrap(), step);

        assert!(matches!(
            parse_rewrite_output("<rewritten_step>dangling"),
            Err(PipelineError::MissingTags)
        ));
        assert!(matches!(
            parse_rewrite_output("<rewritten_step>   </rewritten_step>"),
            Err(PipelineError::EmptyRewrite)
        ));
    }

    #[test]
    fn rewrite_application_inherits_labels() {
        let labeled = LabeledCoT::new(cot(&["a", "b", "the answer is (B)"]), vec![1, 1, 1]).unwrap();
        let rewritten = Step::new("b, restated").unwrap();
        let out = apply_rewrite(&labeled, 1, rewritten.clone()).unwrap();
        assert_eq!(out.labels(), labeled.labels());
        assert_eq!(out.cot().steps()[1], rewritten);
        assert_eq!(out.cot().final_answer(), labeled.cot().final_answer());
    }

    #[test]
    fn self_filter_applies_the_deviation_rule() {
        let keep = LabeledCoT::new(cot(&["a", "b"]), vec![1, 1]).unwrap();
        let drop = LabeledCoT::new(cot(&["c", "d"]), vec![1, -1]).unwrap();
        let dataset = vec![
            (keep.clone(), RewardVector::new(vec![0.9, 0.8]).unwrap()),
            (drop, RewardVector::new(vec![0.9, 0.6]).unwrap()),
        ];
        let kept = self_filter(dataset, &SelfFilterConfig::default()).unwrap();
        assert_eq!(kept, vec![keep]);
    }

    #[test]
    fn self_filter_boundary_is_strict() {
        // |0.6 - 1.0| = 0.4 exactly: not "more than 0.4", so kept.
        let edge = LabeledCoT::new(cot(&["a"]), vec![1]).unwrap();
        let kept = self_filter(
            vec![(edge.clone(), RewardVector::new(vec![0.6]).unwrap())],
            &SelfFilterConfig::default(),
        )
        .unwrap();
        assert_eq!(kept, vec![edge]);
    }

    #[test]
    fn self_filter_is_idempotent_and_validates() {
        let a = LabeledCoT::new(cot(&["a"]), vec![1]).unwrap();
        let rv = RewardVector::new(vec![0.95]).unwrap();
        let once = self_filter(vec![(a.clone(), rv.clone())], &SelfFilterConfig::default()).unwrap();
        let again = self_filter(
            once.iter().cloned().map(|l| (l, rv.clone())).collect(),
            &SelfFilterConfig::default(),
        )
        .unwrap();
        assert_eq!(once, again);

        assert!(matches!(
            self_filter(
                vec![(a.clone(), RewardVector::new(vec![0.5, 0.5]).unwrap())],
                &SelfFilterConfig::default()
            ),
            Err(PipelineError::LengthMismatch { .. })
        ));
        assert!(self_filter(Vec::new(), &SelfFilterConfig { threshold: 0.0 }).is_err());
        assert!(self_filter(Vec::new(), &SelfFilterConfig { threshold: 1.5 }).is_err());
    }

    #[test]
    fn training_records_carry_one_token_per_step() {
        let mut questions = BTreeMap::new();
        questions.insert("q1".to_owned(), question());
        let labeled = LabeledCoT::new(cot(&["First.", "Second."]), vec![1, -1]).unwrap();
        let records = export_training_records(&[labeled], &questions).unwrap();
        assert_eq!(records.len(), 1);
        let rec = &records[0];
        assert_eq!(rec.text().matches(CLASSIFICATION_TOKEN).count(), 2);
        assert_eq!(rec.targets(), &[TargetToken::Plus, TargetToken::Minus]);
        assert!(rec.text().starts_with("What is 2 + 2?"));
        assert!(rec.text().contains("First.\n\n\n\n"));
    }

    #[test]
    fn training_records_survive_pathological_question_text() {
        let spiky = Question::new(
            "q2",
            "Law",
            "Clause one.\n\n\n\n\nClause two?",
            vec![
                (AnswerLabel::from_letter('A').unwrap(), "Yes".to_owned()),
                (AnswerLabel::from_letter('B').unwrap(), "No".to_owned()),
            ],
            AnswerLabel::from_letter('A').unwrap(),
            None,
        )
        .unwrap();
        let mut questions = BTreeMap::new();
        questions.insert("q2".to_owned(), spiky);
        let steps = vec![Step::new("Only step.").unwrap()];
        let c = ChainOfThought::new("q2", steps, GenMeta::mock(0)).unwrap();
        let labeled = LabeledCoT::new(c, vec![1]).unwrap();
        let records = export_training_records(&[labeled], &questions).unwrap();
        assert_eq!(records[0].text().matches(CLASSIFICATION_TOKEN).count(), 1);
    }

    #[test]
    fn training_record_jsonl_round_trips_bytewise() {
        let mut questions = BTreeMap::new();
        questions.insert("q1".to_owned(), question());
        let labeled = LabeledCoT::new(cot(&["First.", "Second.", "Third."]), vec![1, 1, 1]).unwrap();
        let records = export_training_records(&[labeled], &questions).unwrap();

        let mut buf = Vec::new();
        write_training_records(&mut buf, &records).unwrap();
        let parsed = read_training_records(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_training_records(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
        assert!(String::from_utf8(buf).unwrap().contains("\"+\""));
    }

    #[test]
    fn training_record_invariant_is_enforced_on_read() {
        let line = r#"{"text":"no token here","targets":["+"]}"#;
        let err = read_training_records(line.as_bytes()).unwrap_err();
        match err {
            JsonlError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_requires_known_questions() {
        let labeled = LabeledCoT::new(cot(&["a"]), vec![1]).unwrap();
        let err = export_training_records(&[labeled], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, PipelineError::UnknownQuestion(id) if id == "q1"));
    }

    #[test]
    fn labeled_dataset_jsonl_round_trips() {
        let labeled = LabeledCoT::new(correct_cot(), vec![1, 1, 1]).unwrap();
        let entries = vec![
            LabeledEntry::new(labeled.clone(), CotSource::Generated),
            LabeledEntry::new(labeled, CotSource::Rewrite),
        ];
        let mut buf = Vec::new();
        write_labeled_dataset(&mut buf, &entries).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"source\":\"generated\""));
        assert!(text.contains("\"question_id\":\"q1\""));
        let parsed = read_labeled_dataset(buf.as_slice()).unwrap();
        assert_eq!(parsed, entries);
        let mut buf2 = Vec::new();
        write_labeled_dataset(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn labeled_dataset_rejects_invalid_label_sequences() {
        let line = r#"{"question_id":"q1","steps":["a","b"],"labels":[-1,1],"source":"generated","meta":{"model_id":"m","temperature":0.0,"seed":null}}"#;
        let err = read_labeled_dataset(line.as_bytes()).unwrap_err();
        assert!(matches!(err, JsonlError::Parse { line: 1, .. }));
    }

    #[test]
    fn scored_pool_jsonl_round_trips() {
        let scored = ScoredCoT::new(
            correct_cot(),
            RewardVector::new(vec![0.25, 0.5, 0.75]).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_scored_pool(&mut buf, std::slice::from_ref(&scored)).unwrap();
        let parsed = read_scored_pool(buf.as_slice()).unwrap();
        assert_eq!(parsed, vec![scored]);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"rewards\":[0.25,0.5,0.75]"));
    }

    #[test]
    fn scored_cot_requires_alignment() {
        assert!(matches!(
            ScoredCoT::new(correct_cot(), RewardVector::new(vec![0.5]).unwrap()),
            Err(PipelineError::LengthMismatch { steps: 3, scores: 1 })
        ));
    }

    #[test]
    fn refinement_prompt_interleaves_steps_and_scores() {
        let texts: Vec<String> = (0..5).map(|i| format!("Reason {i}.")).collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let scored = ScoredCoT::new(
            cot(&refs),
            RewardVector::new(vec![0.9765625, 0.9453125, 0.6953125, 0.92578125, 0.93359375])
                .unwrap(),
        )
        .unwrap();
        let bundle = build_refinement_prompt(&question(), &scored).unwrap();
        assert!(bundle.user().contains("Step 0: Reason 0."));
        assert!(bundle.user().contains("Score 0: 0.9765625"));
        assert!(bundle.user().contains("Step 4: Reason 4."));
        assert!(bundle.user().contains("Score 4: 0.93359375"));
        assert!(bundle.user().contains("explicitly use the provided scores"));
    }

    #[test]
    fn open_prompts_validate_inputs() {
        let bundle = build_open_cot_prompt("State the rule against perpetuities.").unwrap();
        assert!(bundle.user().contains("Final Response:"));
        assert!(build_open_cot_prompt("  ").is_err());

        let bundle =
            build_open_grader_prompt("Q text", "Reference text", "Student text").unwrap();
        assert!(bundle.user().contains("Reference Correct Response: Reference text"));
        assert!(bundle.user().ends_with("Let's think step by step."));
        assert!(matches!(
            build_open_grader_prompt("Q", "", "S"),
            Err(PipelineError::EmptyGraderInput("reference"))
        ));
    }

    #[test]
    fn grade_parsing_takes_the_last_marker() {
        assert_eq!(parse_grade("analysis [GOOD]").unwrap(), Grade::Good);
        assert_eq!(parse_grade("[GOOD] but actually [BAD]").unwrap(), Grade::Bad);
        assert_eq!(parse_grade("[BAD]... no wait [GOOD]").unwrap(), Grade::Good);
        assert!(matches!(parse_grade("no verdict"), Err(PipelineError::NoGradeMarker)));
    }

    #[test]
    fn prompt_builders_are_pure() {
        let c = correct_cot();
        let a = build_autolabel_prompt(&question(), &c, true);
        let b = build_autolabel_prompt(&question(), &c, true);
        assert_eq!(a, b);
        let labeled = LabeledCoT::new(c, vec![1, 1, 1]).unwrap();
        let p1 = build_counterfactual_prompt(&question(), &labeled, None, 9).unwrap();
        let p2 = build_counterfactual_prompt(&question(), &labeled, None, 9).unwrap();
        assert_eq!(p1, p2);
    }
}
