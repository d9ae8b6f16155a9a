//! Remote backend speaking an OpenAI-compatible chat-completions protocol
//! for generation, plus a minimal `POST /score` contract for PRM scoring.
//!
//! Request bodies are built once per logical request and resent verbatim on
//! retry, so every retry is idempotent at the wire level. Retryable failures
//! (timeouts, transport errors, 5xx) back off exponentially with full jitter
//! from a seeded stream; 4xx and malformed responses fail fast.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, GenParams, GeneratorContract, ScorerContract};
use crate::domain::{Question, RewardVector, Step};
use crate::pipeline::{build_cot_generation_prompt, PromptBundle};
use crate::seeding::{derive_rng, hash_str};

/// Connection and sampling settings for the remote backend.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key; empty means no
    /// Authorization header is sent.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub parallelism_cap: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    /// First backoff window; retry r sleeps uniform(0, backoff_base * 2^r).
    pub backoff_base: Duration,
    /// Seed for the jitter stream, so retry timing is reproducible.
    pub backoff_seed: u64,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env: String::new(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            parallelism_cap: 4,
            temperature: 0.8,
            max_tokens: 2048,
            backoff_base: Duration::from_millis(500),
            backoff_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.base_url.is_empty() {
            return Err(BackendError::InvalidHttpConfig("base_url is empty".into()));
        }
        if self.parallelism_cap < 1 {
            return Err(BackendError::InvalidHttpConfig(
                "parallelism_cap must be >= 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidHttpConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidHttpConfig(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wire formats
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    question: &'a str,
    steps: Vec<&'a str>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Serializes the chat-completions body for a prompt bundle. Field order is
/// fixed: model, messages, temperature, max_tokens.
pub fn chat_request_body(
    cfg: &HttpBackendConfig,
    bundle: &PromptBundle,
    temperature: f64,
    max_tokens: usize,
) -> String {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = bundle.system() {
        messages.push(ChatMessage {
            role: "system",
            content: system,
        });
    }
    messages.push(ChatMessage {
        role: "user",
        content: bundle.user(),
    });
    serde_json::to_string(&ChatRequest {
        model: &cfg.model_id,
        messages,
        temperature,
        max_tokens,
    })
    .expect("chat body serializes")
}

/// Serializes the scorer body: the rendered question plus raw step texts.
pub fn score_request_body(question: &Question, steps: &[Step]) -> String {
    serde_json::to_string(&ScoreRequest {
        question: &question.rendered_with_options(),
        steps: steps.iter().map(|s| s.text()).collect(),
    })
    .expect("score body serializes")
}

// ---------------------------------------------------------------------------
// Transport with retry
// ---------------------------------------------------------------------------

fn api_key(cfg: &HttpBackendConfig) -> Result<Option<String>, BackendError> {
    if cfg.api_key_env.is_empty() {
        return Ok(None);
    }
    std::env::var(&cfg.api_key_env)
        .map(Some)
        .map_err(|_| BackendError::MissingApiKey(cfg.api_key_env.clone()))
}

fn client(cfg: &HttpBackendConfig) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| BackendError::InvalidHttpConfig(e.to_string()))
}

struct Attempt {
    error: BackendError,
    retryable: bool,
}

fn post_once(
    client: &reqwest::blocking::Client,
    url: &str,
    auth: Option<&str>,
    body: &str,
    request_index: usize,
) -> Result<String, Attempt> {
    let mut req = client
        .post(url)
        .header(reqwest::header::CONTENT_TYPE, "application/json")
        .body(body.to_owned());
    if let Some(key) = auth {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            Attempt {
                error: BackendError::Timeout { request_index },
                retryable: true,
            }
        } else {
            Attempt {
                error: BackendError::Transport {
                    request_index,
                    message: e.to_string(),
                },
                retryable: true,
            }
        }
    })?;
    let status = resp.status();
    if status.is_success() {
        resp.text().map_err(|e| Attempt {
            error: BackendError::Transport {
                request_index,
                message: e.to_string(),
            },
            retryable: true,
        })
    } else {
        Err(Attempt {
            error: BackendError::HttpStatus {
                code: status.as_u16(),
                request_index,
            },
            retryable: status.is_server_error(),
        })
    }
}

/// Sends one logical request: up to `1 + max_retries` attempts with the same
/// body, sleeping uniform(0, backoff_base * 2^r) between attempts.
fn post_with_retries(
    cfg: &HttpBackendConfig,
    client: &reqwest::blocking::Client,
    url: &str,
    auth: Option<&str>,
    body: &str,
    request_index: usize,
) -> Result<String, BackendError> {
    let mut rng = derive_rng(
        cfg.backoff_seed,
        &[hash_str("backoff"), request_index as u64],
    );
    let mut attempt = 0u32;
    loop {
        match post_once(client, url, auth, body, request_index) {
            Ok(text) => return Ok(text),
            Err(a) if a.retryable && attempt < cfg.max_retries => {
                let cap = cfg.backoff_base.as_secs_f64() * 2f64.powi(attempt as i32);
                if cap > 0.0 {
                    thread::sleep(Duration::from_secs_f64(rng.random_range(0.0..cap)));
                }
                attempt += 1;
            }
            Err(a) => return Err(a.error),
        }
    }
}

/// Runs `count` independent jobs with at most `cap` worker threads, returning
/// results in job order; the lowest-index error wins.
fn run_indexed<T: Send>(
    count: usize,
    cap: usize,
    job: impl Fn(usize) -> Result<T, BackendError> + Sync,
) -> Result<Vec<T>, BackendError> {
    let slots: Vec<Mutex<Option<Result<T, BackendError>>>> =
        (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..cap.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let result = job(i);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("job ran"))
        .collect()
}

fn parse_chat_content(text: &str, request_index: usize) -> Result<String, BackendError> {
    let parsed: ChatResponse =
        serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse {
            request_index,
            message: e.to_string(),
        })?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| BackendError::MalformedResponse {
            request_index,
            message: "empty choices array".into(),
        })
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

fn completions_url(cfg: &HttpBackendConfig) -> String {
    format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/'))
}

fn score_url(cfg: &HttpBackendConfig) -> String {
    format!("{}/score", cfg.base_url.trim_end_matches('/'))
}

/// The continuation prompt for sampling the next step after `prefix`: the
/// generation prompt with the prefix steps appended after "Answer:".
fn continuation_prompt(
    question: &Question,
    prefix: &[Step],
) -> Result<PromptBundle, BackendError> {
    let bundle = build_cot_generation_prompt(question, &[]).map_err(|e| {
        BackendError::InvalidHttpConfig(format!("prompt assembly failed: {e}"))
    })?;
    if prefix.is_empty() {
        return Ok(bundle);
    }
    let joined: Vec<&str> = prefix.iter().map(|s| s.text()).collect();
    let user = format!("{} {}\n\n", bundle.user(), joined.join("\n\n"));
    Ok(PromptBundle::raw(None, user))
}

/// Samples `count` continuations of `prefix` via the chat endpoint, one
/// request per step. With `stop_at_step_boundary` the reply is cut at the
/// first blank line (one step); otherwise the whole reply becomes the step.
pub fn http_next_steps(
    cfg: &HttpBackendConfig,
    question: &Question,
    prefix: &[Step],
    count: usize,
    stop_at_step_boundary: bool,
) -> Result<Vec<Step>, BackendError> {
    cfg.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let auth = api_key(cfg)?;
    let client = client(cfg)?;
    let url = completions_url(cfg);
    let bundle = continuation_prompt(question, prefix)?;
    let body = chat_request_body(cfg, &bundle, cfg.temperature, cfg.max_tokens);

    run_indexed(count, cfg.parallelism_cap, |i| {
        let text = post_with_retries(cfg, &client, &url, auth.as_deref(), &body, i)?;
        let content = parse_chat_content(&text, i)?;
        let step_text = if stop_at_step_boundary {
            content.split("\n\n").next().unwrap_or("").to_owned()
        } else {
            content
        };
        Step::new(step_text).map_err(|e| BackendError::MalformedResponse {
            request_index: i,
            message: e.to_string(),
        })
    })
}

/// Sends one chat request for an arbitrary prompt bundle and returns the
/// reply content. Labeling and augmentation flows go through here.
pub fn http_chat(
    cfg: &HttpBackendConfig,
    bundle: &PromptBundle,
    params: &GenParams,
) -> Result<String, BackendError> {
    cfg.validate()?;
    let auth = api_key(cfg)?;
    let client = client(cfg)?;
    let url = completions_url(cfg);
    let body = chat_request_body(cfg, bundle, params.temperature, params.max_tokens);
    let text = post_with_retries(cfg, &client, &url, auth.as_deref(), &body, 0)?;
    parse_chat_content(&text, 0)
}

/// Requests one full completion for the question's generation prompt.
pub fn http_complete(
    cfg: &HttpBackendConfig,
    question: &Question,
    params: &GenParams,
) -> Result<String, BackendError> {
    let bundle = build_cot_generation_prompt(question, &[]).map_err(|e| {
        BackendError::InvalidHttpConfig(format!("prompt assembly failed: {e}"))
    })?;
    http_chat(cfg, &bundle, params)
}

/// Scores a step prefix against the `/score` service. Finite out-of-range
/// scores are clamped into [0, 1] at ingestion; non-finite values and length
/// mismatches are malformed.
pub fn http_score(
    cfg: &HttpBackendConfig,
    question: &Question,
    steps: &[Step],
) -> Result<RewardVector, BackendError> {
    cfg.validate()?;
    let auth = api_key(cfg)?;
    let client = client(cfg)?;
    let url = score_url(cfg);
    let body = score_request_body(question, steps);
    let text = post_with_retries(cfg, &client, &url, auth.as_deref(), &body, 0)?;
    let parsed: ScoreResponse =
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse {
            request_index: 0,
            message: e.to_string(),
        })?;
    if parsed.scores.len() != steps.len() {
        return Err(BackendError::MalformedResponse {
            request_index: 0,
            message: format!(
                "expected {} scores, got {}",
                steps.len(),
                parsed.scores.len()
            ),
        });
    }
    let mut clamped = Vec::with_capacity(parsed.scores.len());
    for s in parsed.scores {
        if !s.is_finite() {
            return Err(BackendError::MalformedResponse {
                request_index: 0,
                message: format!("non-finite score {s}"),
            });
        }
        clamped.push(s.clamp(0.0, 1.0));
    }
    Ok(RewardVector::new(clamped)?)
}

/// Generator + scorer over one remote endpoint pair.
pub struct HttpBackend {
    cfg: HttpBackendConfig,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(HttpBackend { cfg })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.cfg
    }
}

impl GeneratorContract for HttpBackend {
    fn next_steps(
        &self,
        question: &Question,
        prefix: &[Step],
        count: usize,
        params: &GenParams,
    ) -> Result<Vec<Step>, BackendError> {
        let mut cfg = self.cfg.clone();
        cfg.temperature = params.temperature;
        cfg.max_tokens = params.max_tokens;
        http_next_steps(&cfg, question, prefix, count, true)
    }

    fn complete(&self, question: &Question, params: &GenParams) -> Result<String, BackendError> {
        http_complete(&self.cfg, question, params)
    }
}

impl ScorerContract for HttpBackend {
    fn score(&self, question: &Question, steps: &[Step]) -> Result<RewardVector, BackendError> {
        http_score(&self.cfg, question, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AnswerLabel;

    fn question() -> Question {
        Question::new(
            "q1",
            "Math",
            "What is 2 + 2?",
            vec![
                (AnswerLabel::from_letter('A').unwrap(), "3".to_owned()),
                (AnswerLabel::from_letter('B').unwrap(), "4".to_owned()),
            ],
            AnswerLabel::from_letter('B').unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = HttpBackendConfig::new("http://localhost:1", "m");
        assert!(cfg.validate().is_ok());
        cfg.parallelism_cap = 0;
        assert!(cfg.validate().is_err());
        cfg.parallelism_cap = 1;
        cfg.max_tokens = 0;
        assert!(cfg.validate().is_err());
        cfg.max_tokens = 10;
        cfg.temperature = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chat_body_field_order_is_fixed() {
        let cfg = HttpBackendConfig::new("http://h", "test-model");
        let bundle = PromptBundle::raw(Some("sys".to_owned()), "user text".to_owned());
        let body = chat_request_body(&cfg, &bundle, 0.8, 2048);
        assert_eq!(
            body,
            r#"{"model":"test-model","messages":[{"role":"system","content":"sys"},{"role":"user","content":"user text"}],"temperature":0.8,"max_tokens":2048}"#
        );
        let no_system = PromptBundle::raw(None, "u".to_owned());
        let body = chat_request_body(&cfg, &no_system, 0.0, 16);
        assert_eq!(
            body,
            r#"{"model":"test-model","messages":[{"role":"user","content":"u"}],"temperature":0.0,"max_tokens":16}"#
        );
    }

    #[test]
    fn score_body_renders_question_and_steps() {
        let steps = vec![Step::new("First.").unwrap(), Step::new("Second.").unwrap()];
        let body = score_request_body(&question(), &steps);
        assert_eq!(
            body,
            r#"{"question":"What is 2 + 2?\nA. 3\nB. 4","steps":["First.","Second."]}"#
        );
    }

    #[test]
    fn zero_count_issues_no_requests() {
        // base_url points nowhere; count = 0 must succeed without contact.
        let cfg = HttpBackendConfig::new("http://127.0.0.1:1", "m");
        let steps = http_next_steps(&cfg, &question(), &[], 0, true).unwrap();
        assert!(steps.is_empty());
    }

    #[test]
    fn missing_api_key_fails_before_any_request() {
        let mut cfg = HttpBackendConfig::new("http://127.0.0.1:1", "m");
        cfg.api_key_env = "PRMKIT_TEST_KEY_THAT_DOES_NOT_EXIST".to_owned();
        let err = http_next_steps(&cfg, &question(), &[], 1, true).unwrap_err();
        assert!(matches!(err, BackendError::MissingApiKey(name) if name == cfg.api_key_env));
    }

    #[test]
    fn continuation_prompt_appends_the_prefix() {
        let prefix = vec![Step::new("Add the twos.").unwrap()];
        let bundle = continuation_prompt(&question(), &prefix).unwrap();
        assert!(bundle.user().contains("Answer: Add the twos.\n\n"));
        assert!(bundle.user().ends_with("\n\n"));
        let bare = continuation_prompt(&question(), &[]).unwrap();
        assert!(bare.user().ends_with("Answer:"));
    }
}
