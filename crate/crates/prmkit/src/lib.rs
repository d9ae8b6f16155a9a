//! prmkit: a backend-agnostic toolkit for process-reward-model (PRM) guided
//! test-time inference and synthetic reasoning-data construction.
//!
//! The crate is organized around a small set of domain types (questions,
//! chains of thought, reward vectors) and the operations the workflow needs:
//!
//! - [`aggregate`]: scalarize a per-step reward vector (min / last / avg).
//! - [`rerank`]: answer selection over sampled CoT pools (MV, WMV, BoN) and
//!   seeded accuracy-at-N estimation.
//! - [`search`]: PRM-guided stepwise generation (beam search and MCTS).
//! - [`backends`]: generator/scorer contracts, an OpenAI-compatible HTTP
//!   client, and a deterministic mock world used as a desk-scale oracle.
//! - [`pipeline`]: prompt builders, auto-label parsing, label conversion,
//!   counterfactual/rewrite augmentation, self-filtering, and training-record
//!   export.
//! - [`report`]: category grouping, deltas against the MV baseline, bootstrap
//!   confidence intervals, CSV and SVG emission.
//! - [`cli`]: the `prmkit` binary entry point.
//!
//! All randomness in the crate flows through explicit seeds; given the same
//! seed and the mock backend, every workflow is bit-reproducible.

pub mod aggregate;
pub mod backends;
pub mod cli;
pub mod domain;
pub mod pipeline;
pub mod rerank;
pub mod report;
pub mod search;
pub mod seeding;
