//! C ABI over the prmkit core: reward aggregation, candidate-pool
//! reranking, and deterministic mock-world search.
//!
//! Conventions:
//! - Fallible calls return a status code; `PRMKIT_OK` (0) means success,
//!   positive codes are non-error outcomes, negative codes are failures.
//! - After any failure the calling thread can fetch a message with
//!   [`prmkit_last_error`]; the pointer stays valid until that thread's
//!   next prmkit call.
//! - Constructors return null on failure. Destructors accept null.
//! - Panics never cross the boundary; they become `PRMKIT_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prmkit::aggregate::{aggregate, AggregationMethod};
use prmkit::backends::{mock_question, MockGenerator, MockScorer, MockWorldConfig};
use prmkit::domain::{ChainOfThought, GenMeta, RewardVector};
use prmkit::rerank::{CandidatePool, Selector};
use prmkit::search::{beam_search, mcts, BeamConfig, MctsConfig, SearchError};

/// Success.
pub const PRMKIT_OK: i32 = 0;
/// The search ran to completion without reaching any terminal state.
pub const PRMKIT_NO_TERMINAL: i32 = 1;
/// A required pointer argument was null.
pub const PRMKIT_ERR_NULL_ARGUMENT: i32 = -1;
/// A string argument was not valid UTF-8.
pub const PRMKIT_ERR_INVALID_UTF8: i32 = -2;
/// An argument was out of range or otherwise unusable.
pub const PRMKIT_ERR_INVALID_ARGUMENT: i32 = -3;
/// A core-library validation or processing step failed.
pub const PRMKIT_ERR_DOMAIN: i32 = -4;
/// An internal panic was caught at the boundary.
pub const PRMKIT_ERR_PANIC: i32 = -5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Display) {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn caught(code: i32, body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            code
        }
    }
}

/// Reads a required C string argument.
///
/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(format!("{what} must not be null"));
        return Err(PRMKIT_ERR_NULL_ARGUMENT);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error(format!("{what} must be valid UTF-8"));
        PRMKIT_ERR_INVALID_UTF8
    })
}

/// How a reward vector is collapsed to one chain score.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum PrmkitAgg {
    Min = 0,
    Last = 1,
    Avg = 2,
}

impl From<PrmkitAgg> for AggregationMethod {
    fn from(agg: PrmkitAgg) -> AggregationMethod {
        match agg {
            PrmkitAgg::Min => AggregationMethod::Min,
            PrmkitAgg::Last => AggregationMethod::Last,
            PrmkitAgg::Avg => AggregationMethod::Avg,
        }
    }
}

/// How one answer is picked from a candidate pool.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum PrmkitSelector {
    Mv = 0,
    Wmv = 1,
    Bon = 2,
}

impl From<PrmkitSelector> for Selector {
    fn from(sel: PrmkitSelector) -> Selector {
        match sel {
            PrmkitSelector::Mv => Selector::Mv,
            PrmkitSelector::Wmv => Selector::Wmv,
            PrmkitSelector::Bon => Selector::Bon,
        }
    }
}

/// Which guided-search procedure to run.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum PrmkitSearchMethod {
    Beam = 0,
    Mcts = 1,
}

/// Outcome of one guided search over a mock-world question.
#[repr(C)]
pub struct PrmkitSearchSummary {
    /// Final answer letter ('A'..'J'), or 0 when no terminal was found.
    pub answer: c_char,
    /// Whether the answer matches the world's designated truth.
    pub correct: bool,
    /// Aggregated score of the returned chain.
    pub score: f64,
    /// Candidate step generations consumed.
    pub generation_units: u64,
    /// Steps in the returned chain.
    pub steps: usize,
}

/// A per-question candidate pool under construction.
pub struct PrmkitPool {
    question_id: String,
    items: Vec<(ChainOfThought, Option<RewardVector>)>,
}

/// A deterministic mock world serving questions, steps, and step scores.
pub struct PrmkitWorld {
    config: MockWorldConfig,
}

/// Returns the library version as a static string.
#[no_mangle]
pub extern "C" fn prmkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the calling thread's most recent error message (empty if none).
/// The pointer stays valid until this thread's next prmkit call.
#[no_mangle]
pub extern "C" fn prmkit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Collapses `len` step scores into one chain score under `agg`.
///
/// # Safety
/// `scores` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prmkit_aggregate(
    scores: *const f64,
    len: usize,
    agg: PrmkitAgg,
    out: *mut f64,
) -> i32 {
    caught(PRMKIT_ERR_PANIC, || {
        if scores.is_null() || out.is_null() {
            set_error("scores and out must not be null");
            return PRMKIT_ERR_NULL_ARGUMENT;
        }
        let slice = unsafe { std::slice::from_raw_parts(scores, len) };
        let rv = match RewardVector::new(slice.to_vec()) {
            Ok(rv) => rv,
            Err(e) => {
                set_error(e);
                return PRMKIT_ERR_DOMAIN;
            }
        };
        match aggregate(&rv, agg.into()) {
            Ok(value) => {
                unsafe { *out = value };
                PRMKIT_OK
            }
            Err(e) => {
                set_error(e);
                PRMKIT_ERR_DOMAIN
            }
        }
    })
}

/// Creates an empty candidate pool for one question. Returns null on failure.
///
/// # Safety
/// `question_id` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prmkit_pool_new(question_id: *const c_char) -> *mut PrmkitPool {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let id = match unsafe { required_str(question_id, "question_id") } {
            Ok(s) => s,
            Err(_) => return ptr::null_mut(),
        };
        if id.is_empty() {
            set_error("question_id must not be empty");
            return ptr::null_mut();
        }
        Box::into_raw(Box::new(PrmkitPool {
            question_id: id.to_owned(),
            items: Vec::new(),
        }))
    }));
    result.unwrap_or_else(|_| {
        set_error("internal panic");
        ptr::null_mut()
    })
}

/// Adds one candidate chain to the pool.
///
/// `cot_text` is a full chain: steps separated by blank lines, the last step
/// declaring "the answer is (X)". Pass null `scores` for an unscored
/// candidate (usable by MV only); otherwise `scores_len` must equal the
/// chain's step count.
///
/// # Safety
/// `pool` must come from [`prmkit_pool_new`]; `cot_text` must be
/// NUL-terminated; `scores` must be null or point to `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prmkit_pool_push(
    pool: *mut PrmkitPool,
    cot_text: *const c_char,
    scores: *const f64,
    scores_len: usize,
) -> i32 {
    caught(PRMKIT_ERR_PANIC, || {
        if pool.is_null() {
            set_error("pool must not be null");
            return PRMKIT_ERR_NULL_ARGUMENT;
        }
        let text = match unsafe { required_str(cot_text, "cot_text") } {
            Ok(s) => s,
            Err(code) => return code,
        };
        let pool = unsafe { &mut *pool };
        let cot = match ChainOfThought::from_text(&pool.question_id, text, GenMeta::mock(0)) {
            Ok(cot) => cot,
            Err(e) => {
                set_error(e);
                return PRMKIT_ERR_DOMAIN;
            }
        };
        if cot.final_answer().is_none() {
            set_error("candidate does not end with \"the answer is (X)\"");
            return PRMKIT_ERR_DOMAIN;
        }
        let rewards = if scores.is_null() {
            None
        } else {
            if scores_len != cot.k() {
                set_error(format!(
                    "expected {} scores for a {}-step chain, got {scores_len}",
                    cot.k(),
                    cot.k()
                ));
                return PRMKIT_ERR_INVALID_ARGUMENT;
            }
            let slice = unsafe { std::slice::from_raw_parts(scores, scores_len) };
            match RewardVector::new(slice.to_vec()) {
                Ok(rv) => Some(rv),
                Err(e) => {
                    set_error(e);
                    return PRMKIT_ERR_DOMAIN;
                }
            }
        };
        pool.items.push((cot, rewards));
        PRMKIT_OK
    })
}

/// Returns the number of candidates pushed so far (0 for null).
///
/// # Safety
/// `pool` must be null or come from [`prmkit_pool_new`].
#[no_mangle]
pub unsafe extern "C" fn prmkit_pool_len(pool: *const PrmkitPool) -> usize {
    if pool.is_null() {
        return 0;
    }
    unsafe { &*pool }.items.len()
}

/// Picks one answer letter from the pool and writes it to `out_letter`.
///
/// # Safety
/// `pool` must come from [`prmkit_pool_new`]; `out_letter` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prmkit_pool_select(
    pool: *const PrmkitPool,
    selector: PrmkitSelector,
    agg: PrmkitAgg,
    out_letter: *mut c_char,
) -> i32 {
    caught(PRMKIT_ERR_PANIC, || {
        if pool.is_null() || out_letter.is_null() {
            set_error("pool and out_letter must not be null");
            return PRMKIT_ERR_NULL_ARGUMENT;
        }
        let pool = unsafe { &*pool };
        let built = match CandidatePool::new(pool.question_id.clone(), pool.items.clone()) {
            Ok(p) => p,
            Err(e) => {
                set_error(e);
                return PRMKIT_ERR_DOMAIN;
            }
        };
        match Selector::from(selector).select(&built, agg.into()) {
            Ok(label) => {
                unsafe { *out_letter = label.letter() as c_char };
                PRMKIT_OK
            }
            Err(e) => {
                set_error(e);
                PRMKIT_ERR_DOMAIN
            }
        }
    })
}

/// Frees a pool. Null is a no-op.
///
/// # Safety
/// `pool` must be null or an unfreed pointer from [`prmkit_pool_new`].
#[no_mangle]
pub unsafe extern "C" fn prmkit_pool_free(pool: *mut PrmkitPool) {
    if !pool.is_null() {
        drop(unsafe { Box::from_raw(pool) });
    }
}

/// Creates a mock world. Returns null if any parameter is out of range.
///
/// `branching` children per node, terminals at `depth`, a `density`
/// fraction of terminals designated correct (0 < density <= 1), and
/// step scores jittered by up to `noise` (0 <= noise <= 0.5).
#[no_mangle]
pub extern "C" fn prmkit_world_new(
    seed: u64,
    branching: usize,
    depth: usize,
    density: f64,
    noise: f64,
) -> *mut PrmkitWorld {
    let result = catch_unwind(|| {
        if branching == 0 || depth == 0 {
            set_error("branching and depth must be at least 1");
            return ptr::null_mut();
        }
        if !(density > 0.0 && density <= 1.0) {
            set_error("density must be in (0, 1]");
            return ptr::null_mut();
        }
        if !(0.0..=0.5).contains(&noise) {
            set_error("noise must be in [0, 0.5]");
            return ptr::null_mut();
        }
        Box::into_raw(Box::new(PrmkitWorld {
            config: MockWorldConfig {
                seed,
                branching,
                depth,
                correct_path_density: density,
                score_noise: noise,
                ..MockWorldConfig::default()
            },
        }))
    });
    result.unwrap_or_else(|_| {
        set_error("internal panic");
        ptr::null_mut()
    })
}

/// Runs a guided search over the world's question `question_id`.
///
/// Returns `PRMKIT_OK` when a terminal chain was found and summarized,
/// `PRMKIT_NO_TERMINAL` (with a zeroed summary) when the search exhausted
/// its budget without reaching a terminal, or a negative error code.
///
/// # Safety
/// `world` must come from [`prmkit_world_new`]; `question_id` must be
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prmkit_world_search(
    world: *const PrmkitWorld,
    question_id: *const c_char,
    method: PrmkitSearchMethod,
    agg: PrmkitAgg,
    out: *mut PrmkitSearchSummary,
) -> i32 {
    caught(PRMKIT_ERR_PANIC, || {
        if world.is_null() || out.is_null() {
            set_error("world and out must not be null");
            return PRMKIT_ERR_NULL_ARGUMENT;
        }
        let qid = match unsafe { required_str(question_id, "question_id") } {
            Ok(s) => s,
            Err(code) => return code,
        };
        let config = unsafe { &*world }.config.clone();
        let question = match mock_question(&config.for_question(qid), qid, "Math") {
            Ok(q) => q,
            Err(e) => {
                set_error(e);
                return PRMKIT_ERR_DOMAIN;
            }
        };
        let generator = MockGenerator::per_question(config.clone());
        let scorer = MockScorer::per_question(config);
        let result = match method {
            PrmkitSearchMethod::Beam => {
                let cfg = BeamConfig {
                    method: agg.into(),
                    ..BeamConfig::default()
                };
                beam_search(&generator, &scorer, &question, &cfg)
            }
            PrmkitSearchMethod::Mcts => {
                let cfg = MctsConfig {
                    method: agg.into(),
                    ..MctsConfig::default()
                };
                mcts(&generator, &scorer, &question, &cfg)
            }
        };
        match result {
            Ok(found) => {
                let answer = found.cot.final_answer();
                unsafe {
                    *out = PrmkitSearchSummary {
                        answer: answer.map_or(0, |a| a.letter() as c_char),
                        correct: answer == Some(question.truth()),
                        score: found.score,
                        generation_units: found.generation_units,
                        steps: found.cot.k(),
                    };
                }
                PRMKIT_OK
            }
            Err(SearchError::NoTerminalFound) => {
                unsafe {
                    *out = PrmkitSearchSummary {
                        answer: 0,
                        correct: false,
                        score: 0.0,
                        generation_units: 0,
                        steps: 0,
                    };
                }
                PRMKIT_NO_TERMINAL
            }
            Err(e) => {
                set_error(e);
                PRMKIT_ERR_DOMAIN
            }
        }
    })
}

/// Frees a world. Null is a no-op.
///
/// # Safety
/// `world` must be null or an unfreed pointer from [`prmkit_world_new`].
#[no_mangle]
pub unsafe extern "C" fn prmkit_world_free(world: *mut PrmkitWorld) {
    if !world.is_null() {
        drop(unsafe { Box::from_raw(world) });
    }
}
