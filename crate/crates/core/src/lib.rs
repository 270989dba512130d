//! Caption-expansion evaluation harness.
//!
//! A caption is expanded by a text model into entailed and contradicting
//! hypotheses, every hypothesis is scored against an image through a
//! vision-language model's yes/no likelihood, and the scores are balanced
//! into a single image-text alignment value. The crate also carries the
//! benchmark drivers and the metric suite used to evaluate those values.

pub mod aggregation;
pub mod benchmarks;
pub mod expansion;
pub mod gateway;
pub mod hashing;
pub mod metrics;
pub mod scoring;
pub mod store;

pub use aggregation::{balance, ensemble_routes, BalanceConfig, BalancedScore, Degradation};
pub use expansion::{expand_caption, parse_expansion, render_prompt, ExpansionSet, PromptTemplate};
pub use gateway::{LikelihoodMode, LikelihoodRecord, LlmClient, ModelEndpoint, VlmClient};
pub use scoring::{format_question, score_triple, TripleScores};
pub use store::Store;
