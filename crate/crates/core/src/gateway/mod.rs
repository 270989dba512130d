//! Clients for remote text-generation and image-conditioned likelihood
//! endpoints, plus in-process mock backends.
//!
//! Two traits cover everything the pipeline needs from a model:
//! [`LlmClient`] turns a prompt into completion text and [`VlmClient`]
//! turns an (image, yes/no question) pair into a normalized
//! [`LikelihoodRecord`]. HTTP implementations live in [`http`], test
//! doubles in [`mock`].

mod http;
mod limiter;
mod mock;

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;

pub use http::{HttpLlm, HttpVlm};
pub use limiter::{InFlightLimiter, Limited, Permit};
pub use mock::{make_mock_vlm, question_hash, MockLlm, MockResponse, MockVlm};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint `{endpoint}` unreachable after {attempts} attempt(s): {last_error}")]
    EndpointUnreachable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("endpoint `{endpoint}` rejected credentials (HTTP {status})")]
    AuthFailed { endpoint: String, status: u16 },
    #[error("endpoint `{endpoint}` rejected the request (HTTP {status}): {body}")]
    Rejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from `{endpoint}`: {reason}")]
    ResponseMalformed { endpoint: String, reason: String },
    #[error("answer is neither yes nor no: {answer:?}")]
    AnswerUnparseable { answer: String },
    #[error("response from `{endpoint}` carries no yes/no log-probabilities")]
    LogprobsMissing { endpoint: String },
    #[error("endpoint `{endpoint}` is a {actual} endpoint, expected {expected}")]
    WrongKind {
        endpoint: String,
        expected: EndpointKind,
        actual: EndpointKind,
    },
    #[error("invalid endpoint `{endpoint}`: {reason}")]
    InvalidEndpoint { endpoint: String, reason: String },
    #[error("cannot read image {path}: {source}")]
    ImageUnreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache-only run has no entry for {key}")]
    CacheMiss { key: String },
}

impl GatewayError {
    /// True for errors that a retry might resolve.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::EndpointUnreachable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Llm,
    Vlm,
}

impl fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndpointKind::Llm => "llm",
            EndpointKind::Vlm => "vlm",
        })
    }
}

/// Dotted JSON paths used to pull fields out of endpoint responses.
///
/// The defaults match the native wire contract. Other server shapes are
/// adapted by pointing these at their fields, e.g. `choices.0.text`.
/// Numeric path segments index into arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub text: String,
    pub logprob_yes: String,
    pub logprob_no: String,
    pub answer: String,
    /// Path to a list of `{"token", "logprob"}` candidates. When set, the
    /// first candidate whose trimmed token equals "yes" (resp. "no")
    /// case-insensitively supplies that log-probability.
    pub top_logprobs: Option<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            text: "text".into(),
            logprob_yes: "logprob_yes".into(),
            logprob_no: "logprob_no".into(),
            answer: "answer".into(),
            top_logprobs: None,
        }
    }
}

fn default_timeout() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    4
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff() -> f64 {
    1.0
}

/// A remote model service.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub kind: EndpointKind,
    /// Model identifier sent on the wire. Defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Attempts per call, counting the first.
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; each later one doubles.
    #[serde(default = "default_backoff")]
    pub initial_backoff_secs: f64,
    /// Overrides the request path (`/generate` or `/likelihood`).
    #[serde(default)]
    pub route: Option<String>,
    #[serde(default)]
    pub fields: FieldMap,
}

impl fmt::Debug for ModelEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelEndpoint")
            .field("name", &self.name)
            .field("base_url", &self.base_url)
            .field("kind", &self.kind)
            .field("model", &self.model)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .field("timeout_secs", &self.timeout_secs)
            .field("max_in_flight", &self.max_in_flight)
            .finish_non_exhaustive()
    }
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, kind: EndpointKind) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            kind,
            model: None,
            auth_token: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            max_attempts: default_attempts(),
            initial_backoff_secs: default_backoff(),
            route: None,
            fields: FieldMap::default(),
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            initial_backoff: Duration::from_secs_f64(self.initial_backoff_secs),
            ..RetryPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |reason: &str| GatewayError::InvalidEndpoint {
            endpoint: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name is empty"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid("max_in_flight must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(invalid("max_attempts must be at least 1"));
        }
        if !(self.initial_backoff_secs.is_finite() && self.initial_backoff_secs >= 0.0) {
            return Err(invalid("initial_backoff_secs must be a non-negative number"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(invalid("timeout_secs must be positive"));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(invalid("base_url must be an http(s) URL"));
        }
        Ok(())
    }

    pub(crate) fn expect_kind(&self, expected: EndpointKind) -> Result<(), GatewayError> {
        if self.kind != expected {
            return Err(GatewayError::WrongKind {
                endpoint: self.name.clone(),
                expected,
                actual: self.kind,
            });
        }
        Ok(())
    }
}

/// Decoding parameters for text generation. Temperature defaults to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Softmax over the "yes"/"no" token log-probabilities.
    #[default]
    Logprob,
    /// Hard yes/no read from generated answer text.
    BinaryText,
}

impl LikelihoodMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LikelihoodMode::Logprob => "logprob",
            LikelihoodMode::BinaryText => "binary_text",
        }
    }
}

/// Evidence a likelihood record was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RawEvidence {
    Logprobs { logprob_yes: f64, logprob_no: f64 },
    Answer { answer_text: String },
    /// Probability supplied directly by a mock backend.
    Fixed { p_yes: f64 },
}

/// Normalized yes/no probabilities for one (image, question, model) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRecord {
    pub image_id: String,
    pub question: String,
    pub model: String,
    pub p_yes: f64,
    pub p_no: f64,
    pub raw: RawEvidence,
    #[serde(default)]
    pub retrieved_from_cache: bool,
}

impl LikelihoodRecord {
    pub fn from_logprobs(
        image_id: &str,
        question: &str,
        model: &str,
        logprob_yes: f64,
        logprob_no: f64,
    ) -> Result<Self, GatewayError> {
        let p_yes = normalize_logprobs(logprob_yes, logprob_no).ok_or_else(|| {
            GatewayError::ResponseMalformed {
                endpoint: model.to_string(),
                reason: format!("non-normalizable log-probabilities ({logprob_yes}, {logprob_no})"),
            }
        })?;
        Ok(Self::build(
            image_id,
            question,
            model,
            p_yes,
            RawEvidence::Logprobs {
                logprob_yes,
                logprob_no,
            },
        ))
    }

    pub fn from_answer(
        image_id: &str,
        question: &str,
        model: &str,
        answer: &str,
    ) -> Result<Self, GatewayError> {
        let yes = parse_binary_answer(answer).ok_or_else(|| GatewayError::AnswerUnparseable {
            answer: answer.to_string(),
        })?;
        Ok(Self::build(
            image_id,
            question,
            model,
            if yes { 1.0 } else { 0.0 },
            RawEvidence::Answer {
                answer_text: answer.to_string(),
            },
        ))
    }

    /// Record for a probability given directly. Values are clamped to [0, 1].
    pub fn from_probability(image_id: &str, question: &str, model: &str, p_yes: f64) -> Self {
        let p_yes = p_yes.clamp(0.0, 1.0);
        Self::build(image_id, question, model, p_yes, RawEvidence::Fixed { p_yes })
    }

    fn build(image_id: &str, question: &str, model: &str, p_yes: f64, raw: RawEvidence) -> Self {
        Self {
            image_id: image_id.to_string(),
            question: question.to_string(),
            model: model.to_string(),
            p_yes,
            p_no: 1.0 - p_yes,
            raw,
            retrieved_from_cache: false,
        }
    }
}

/// Two-way softmax: `exp(yes) / (exp(yes) + exp(no))`.
///
/// Evaluated through the log-odds so that large magnitudes do not
/// overflow and a common shift of both inputs cancels exactly. Returns
/// `None` when the inputs carry no usable information (NaN, or both
/// infinite).
pub fn normalize_logprobs(logprob_yes: f64, logprob_no: f64) -> Option<f64> {
    let log_odds_no = logprob_no - logprob_yes;
    if log_odds_no.is_nan() {
        return None;
    }
    let p = 1.0 / (1.0 + log_odds_no.exp());
    Some(p.clamp(0.0, 1.0))
}

/// Reads a yes/no answer from its leading word, case-insensitively.
pub fn parse_binary_answer(answer: &str) -> Option<bool> {
    let word: String = answer
        .trim_start()
        .chars()
        .skip_while(|c| !c.is_alphanumeric())
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Image bytes plus their content hash.
#[derive(Clone)]
pub struct ImageInput {
    id: String,
    bytes: Arc<[u8]>,
}

impl fmt::Debug for ImageInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageInput")
            .field("id", &self.id)
            .field("len", &self.bytes.len())
            .finish()
    }
}

impl ImageInput {
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Self {
        let bytes = bytes.into();
        Self {
            id: sha256_hex(&bytes),
            bytes,
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| GatewayError::ImageUnreadable {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_bytes(bytes))
    }

    /// Hex SHA-256 of the image bytes.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Text-generation backend.
pub trait LlmClient: Send + Sync {
    fn model(&self) -> &str;

    fn generate_text(&self, prompt: &str, params: &GenerateParams) -> Result<String, GatewayError>;
}

/// Image-conditioned yes/no likelihood backend.
pub trait VlmClient: Send + Sync {
    fn model(&self) -> &str;

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError>;
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn model(&self) -> &str {
        (**self).model()
    }

    fn generate_text(&self, prompt: &str, params: &GenerateParams) -> Result<String, GatewayError> {
        (**self).generate_text(prompt, params)
    }
}

impl<T: VlmClient + ?Sized> VlmClient for Arc<T> {
    fn model(&self) -> &str {
        (**self).model()
    }

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError> {
        (**self).query_likelihood(image, question, mode)
    }
}

/// Retry schedule for transient transport failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor).min(self.max_backoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_oracle(a: f64, b: f64) -> f64 {
        // textbook form, fine for moderate magnitudes
        a.exp() / (a.exp() + b.exp())
    }

    #[test]
    fn logprob_normalization_example() {
        let p = normalize_logprobs(-0.1, -2.3).unwrap();
        let oracle = softmax_oracle(-0.1, -2.3);
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - 0.900_249_510_880_314_8).abs() < 1e-12, "{p}");
    }

    #[test]
    fn equal_logprobs_give_half() {
        assert_eq!(normalize_logprobs(-1.7, -1.7), Some(0.5));
        assert_eq!(normalize_logprobs(0.0, 0.0), Some(0.5));
    }

    #[test]
    fn extreme_logprobs_stay_finite() {
        assert_eq!(normalize_logprobs(0.0, f64::NEG_INFINITY), Some(1.0));
        assert_eq!(normalize_logprobs(f64::NEG_INFINITY, 0.0), Some(0.0));
        assert_eq!(normalize_logprobs(-1000.0, 0.0), Some(0.0));
        assert_eq!(normalize_logprobs(f64::NEG_INFINITY, f64::NEG_INFINITY), None);
        assert_eq!(normalize_logprobs(f64::NAN, 0.0), None);
    }

    #[test]
    fn binary_answers() {
        assert_eq!(parse_binary_answer("Yes, it is."), Some(true));
        assert_eq!(parse_binary_answer("  no"), Some(false));
        assert_eq!(parse_binary_answer("NO."), Some(false));
        assert_eq!(parse_binary_answer("\"yes\""), Some(true));
        assert_eq!(parse_binary_answer("Yesterday"), None);
        assert_eq!(parse_binary_answer("nope"), None);
        assert_eq!(parse_binary_answer("maybe yes"), None);
        assert_eq!(parse_binary_answer(""), None);
    }

    #[test]
    fn record_from_answer() {
        let r = LikelihoodRecord::from_answer("img", "q", "m", "Yes, it is.").unwrap();
        assert_eq!(r.p_yes, 1.0);
        assert_eq!(r.p_no, 0.0);
        let err = LikelihoodRecord::from_answer("img", "q", "m", "perhaps").unwrap_err();
        assert!(matches!(err, GatewayError::AnswerUnparseable { .. }));
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = ModelEndpoint::new("gen", "http://localhost:8000", EndpointKind::Llm);
        assert!(ep.validate().is_ok());
        ep.max_in_flight = 0;
        assert!(ep.validate().is_err());
        ep.max_in_flight = 1;
        ep.max_attempts = 0;
        assert!(ep.validate().is_err());
        ep.max_attempts = 5;
        ep.initial_backoff_secs = -1.0;
        assert!(ep.validate().is_err());
        ep.initial_backoff_secs = 0.25;
        assert!(ep.validate().is_ok());
        let policy = ep.retry_policy();
        assert_eq!((policy.max_attempts, policy.backoff(2)), (5, Duration::from_millis(500)));
        ep.base_url = "localhost".into();
        assert!(ep.validate().is_err());
    }

    #[test]
    fn debug_redacts_token() {
        let mut ep = ModelEndpoint::new("gen", "http://localhost:8000", EndpointKind::Llm);
        ep.auth_token = Some("sk-secret".into());
        let shown = format!("{ep:?}");
        assert!(!shown.contains("sk-secret"));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy::default();
        assert_eq!(policy.backoff(1), Duration::from_secs(1));
        assert_eq!(policy.backoff(2), Duration::from_secs(2));
        assert_eq!(policy.backoff(3), Duration::from_secs(4));
        assert_eq!(policy.backoff(10), Duration::from_secs(30));
    }

    #[test]
    fn image_id_is_content_hash() {
        let a = ImageInput::from_bytes(b"pixels".to_vec());
        let b = ImageInput::from_bytes(b"pixels".to_vec());
        assert_eq!(a.id(), b.id());
        assert_eq!(a.id(), sha256_hex(b"pixels"));
    }
}
