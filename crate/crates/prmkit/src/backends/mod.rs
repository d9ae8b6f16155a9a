//! Generator and scorer contracts plus their two implementations: a remote
//! OpenAI-compatible HTTP backend and a deterministic mock world that serves
//! as the desk-scale oracle for search and reranking tests.

pub mod http;
pub mod mock;

use thiserror::Error;

use crate::domain::{Question, RewardVector, Step};

pub use http::{
    http_chat, http_complete, http_next_steps, http_score, HttpBackend, HttpBackendConfig,
};
pub use mock::{
    mock_first_bad, mock_next_steps, mock_question, mock_score, mock_terminal_count,
    MockGenerator, MockScorer, MockWorldConfig,
};

/// Sampling parameters passed through to a generator call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 0.8,
            max_tokens: 2048,
            seed: None,
        }
    }
}

impl GenParams {
    /// Zero-temperature parameters used for labeling calls.
    pub fn labeling() -> Self {
        GenParams {
            temperature: 0.0,
            ..GenParams::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Stepwise text generation: the `LLM.step(·)` of the search algorithms.
///
/// `next_steps` returns exactly `count` steps, or fewer only when the prefix
/// is terminal. Implementations must be deterministic in their own
/// configuration plus `(question, prefix, count, params)`.
pub trait GeneratorContract {
    fn next_steps(
        &self,
        question: &Question,
        prefix: &[Step],
        count: usize,
        params: &GenParams,
    ) -> Result<Vec<Step>, BackendError>;

    /// One full completion for the question (a whole chain of thought).
    fn complete(&self, question: &Question, params: &GenParams) -> Result<String, BackendError>;
}

/// Per-step reward scoring: the `PRM(·)` contract.
///
/// The output has one score per input step, clamped to `[0, 1]`.
pub trait ScorerContract {
    fn score(&self, question: &Question, steps: &[Step]) -> Result<RewardVector, BackendError>;
}

/// Errors from either backend. HTTP variants carry the index of the request
/// within the logical call that failed.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request {request_index} timed out")]
    Timeout { request_index: usize },
    #[error("request {request_index} failed with HTTP status {code}")]
    HttpStatus { code: u16, request_index: usize },
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("request {request_index} returned a malformed response: {message}")]
    MalformedResponse {
        request_index: usize,
        message: String,
    },
    #[error("request {request_index} transport failure: {message}")]
    Transport {
        request_index: usize,
        message: String,
    },
    #[error("prefix depth {depth} exceeds world depth {max}")]
    PrefixTooDeep { depth: usize, max: usize },
    #[error("steps do not decode as a world path: {0}")]
    UnknownPath(String),
    #[error("invalid mock world: {0}")]
    InvalidMockConfig(String),
    #[error("invalid backend config: {0}")]
    InvalidHttpConfig(String),
    #[error("domain error: {0}")]
    Domain(#[from] crate::domain::DomainError),
}
