//! Wire-level tests for the HTTP backend against a scripted local server:
//! request bodies frozen as goldens, auth header sourcing, retry/backoff
//! budgets, fault injection, and response validation.

mod common;

use std::path::PathBuf;
use std::time::Duration;

use common::{ScriptedResponse, ScriptedServer};
use prmkit::backends::{
    http_chat, http_next_steps, http_score, BackendError, GenParams, HttpBackendConfig,
};
use prmkit::domain::{AnswerLabel, Question, Step};
use prmkit::pipeline::PromptBundle;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("goldens")
        .join(name)
}

/// Compares `actual` to the stored golden byte-for-byte. Set
/// PRMKIT_UPDATE_GOLDENS=1 to rewrite the stored files instead.
fn assert_matches_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var("PRMKIT_UPDATE_GOLDENS").is_ok() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
    assert_eq!(
        actual.as_bytes(),
        expected.as_bytes(),
        "request body diverged from {}",
        path.display()
    );
}

fn fixture_question() -> Question {
    let letter = |c| AnswerLabel::from_letter(c).unwrap();
    Question::new(
        "wire-q1",
        "Math",
        "What is 7 times 8?",
        vec![
            (letter('A'), "54".to_owned()),
            (letter('B'), "56".to_owned()),
            (letter('C'), "58".to_owned()),
            (letter('D'), "63".to_owned()),
        ],
        letter('B'),
        None,
    )
    .unwrap()
}

fn config_for(server: &ScriptedServer) -> HttpBackendConfig {
    let mut cfg = HttpBackendConfig::new(server.base_url(), "golden-model");
    cfg.backoff_base = Duration::from_millis(1);
    cfg
}

fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string()
}

#[test]
fn generation_request_matches_golden() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(chat_reply("X\n\nY"))]);
    let cfg = config_for(&server);
    let steps = http_next_steps(&cfg, &fixture_question(), &[], 1, true).unwrap();
    assert_eq!(steps, vec![Step::new("X").unwrap()]);

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].method, "POST");
    assert_eq!(requests[0].path, "/v1/chat/completions");
    assert_eq!(requests[0].content_type.as_deref(), Some("application/json"));
    assert_eq!(requests[0].authorization, None);
    assert_matches_golden("chat_request.json", &requests[0].body);
}

#[test]
fn scoring_request_matches_golden() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(r#"{"scores":[0.9,0.2]}"#)]);
    let cfg = config_for(&server);
    let steps = vec![
        Step::new("Multiply 7 by 8.").unwrap(),
        Step::new("Therefore the answer is (B).").unwrap(),
    ];
    let rewards = http_score(&cfg, &fixture_question(), &steps).unwrap();
    assert_eq!(rewards.scores(), &[0.9, 0.2]);

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert_eq!(requests[0].method, "POST");
    assert_eq!(requests[0].path, "/score");
    assert_matches_golden("score_request.json", &requests[0].body);
}

#[test]
fn bearer_token_comes_from_the_named_env_var() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(chat_reply("reply"))]);
    let mut cfg = config_for(&server);
    cfg.api_key_env = "PRMKIT_WIRE_TEST_KEY".to_owned();
    std::env::set_var("PRMKIT_WIRE_TEST_KEY", "test-key-123");

    let bundle = PromptBundle::raw(None, "hello".to_owned());
    let reply = http_chat(&cfg, &bundle, &GenParams::labeling()).unwrap();
    assert_eq!(reply, "reply");
    let requests = server.requests();
    assert_eq!(
        requests[0].authorization.as_deref(),
        Some("Bearer test-key-123")
    );
}

#[test]
fn missing_api_key_sends_nothing() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(chat_reply("unused"))]);
    let mut cfg = config_for(&server);
    cfg.api_key_env = "PRMKIT_WIRE_TEST_KEY_UNSET".to_owned();
    let err = http_next_steps(&cfg, &fixture_question(), &[], 2, true).unwrap_err();
    assert!(matches!(err, BackendError::MissingApiKey(_)));
    assert!(server.requests().is_empty());
}

#[test]
fn transient_server_errors_are_retried_to_success() {
    let server = ScriptedServer::start(vec![
        ScriptedResponse::status(500),
        ScriptedResponse::status(500),
        ScriptedResponse::ok(chat_reply("Recovered step")),
    ]);
    let mut cfg = config_for(&server);
    cfg.max_retries = 3;
    let steps = http_next_steps(&cfg, &fixture_question(), &[], 1, true).unwrap();
    assert_eq!(steps, vec![Step::new("Recovered step").unwrap()]);

    // Two failures plus the success; every attempt resends identical bytes.
    let requests = server.requests();
    assert_eq!(requests.len(), 3);
    assert!(requests.windows(2).all(|w| w[0].body == w[1].body));
}

#[test]
fn retry_budget_is_bounded_per_logical_call() {
    let server = ScriptedServer::start(vec![ScriptedResponse::status(503)]);
    let mut cfg = config_for(&server);
    cfg.max_retries = 1;
    cfg.parallelism_cap = 1;
    let count = 2;
    let err = http_next_steps(&cfg, &fixture_question(), &[], count, true).unwrap_err();
    assert!(
        matches!(err, BackendError::HttpStatus { code: 503, .. }),
        "{err}"
    );
    // Exactly count * (1 + max_retries) attempts, never more.
    assert_eq!(
        server.requests().len(),
        count * (1 + cfg.max_retries as usize)
    );
}

#[test]
fn client_errors_fail_fast() {
    let server = ScriptedServer::start(vec![ScriptedResponse::status(400)]);
    let mut cfg = config_for(&server);
    cfg.max_retries = 3;
    let err = http_next_steps(&cfg, &fixture_question(), &[], 1, true).unwrap_err();
    assert!(matches!(
        err,
        BackendError::HttpStatus {
            code: 400,
            request_index: 0
        }
    ));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn slow_responses_time_out() {
    let server = ScriptedServer::start(vec![ScriptedResponse::delayed(
        chat_reply("too late"),
        Duration::from_millis(400),
    )]);
    let mut cfg = config_for(&server);
    cfg.timeout = Duration::from_millis(100);
    cfg.max_retries = 0;
    let err = http_next_steps(&cfg, &fixture_question(), &[], 1, true).unwrap_err();
    assert!(matches!(err, BackendError::Timeout { request_index: 0 }), "{err}");
}

#[test]
fn malformed_replies_are_not_retried() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok("this is not json")]);
    let mut cfg = config_for(&server);
    cfg.max_retries = 2;
    let err = http_next_steps(&cfg, &fixture_question(), &[], 1, true).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse { .. }));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn score_length_mismatch_is_malformed() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(r#"{"scores":[0.5]}"#)]);
    let cfg = config_for(&server);
    let steps = vec![Step::new("One.").unwrap(), Step::new("Two.").unwrap()];
    let err = http_score(&cfg, &fixture_question(), &steps).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse { .. }));
}

#[test]
fn out_of_range_scores_are_clamped() {
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(r#"{"scores":[-0.5,1.7]}"#)]);
    let cfg = config_for(&server);
    let steps = vec![Step::new("One.").unwrap(), Step::new("Two.").unwrap()];
    let rewards = http_score(&cfg, &fixture_question(), &steps).unwrap();
    assert_eq!(rewards.scores(), &[0.0, 1.0]);
}

#[test]
fn without_boundary_stop_the_reply_must_be_a_single_step() {
    // A one-paragraph reply becomes the step verbatim.
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(chat_reply("X only"))]);
    let cfg = config_for(&server);
    let steps = http_next_steps(&cfg, &fixture_question(), &[], 1, false).unwrap();
    assert_eq!(steps, vec![Step::new("X only").unwrap()]);

    // A multi-paragraph reply violates the one-step contract.
    let server = ScriptedServer::start(vec![ScriptedResponse::ok(chat_reply("X\n\nY"))]);
    let cfg = config_for(&server);
    let err = http_next_steps(&cfg, &fixture_question(), &[], 1, false).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse { .. }));
}
