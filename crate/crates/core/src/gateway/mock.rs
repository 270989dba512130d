//! Deterministic in-process backends.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{GatewayError, GenerateParams, ImageInput, LikelihoodMode, LikelihoodRecord, LlmClient, VlmClient};
use crate::hashing::sha256_hex;

/// Key component identifying a question in mock score tables.
pub fn question_hash(question: &str) -> String {
    sha256_hex(question)
}

fn seeded_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const FILLER: &[&str] = &[
    "the", "image", "shows", "a", "person", "dog", "red", "blue", "ball", "near", "under", "tree",
    "holding", "small", "large", "two", "sky", "table", "looking", "at",
];

/// Text backend that answers from fixed completions.
///
/// Lookup order: exact-prompt responses, then the script (consumed in
/// order, the last entry repeats), then the canned completion, and
/// finally pseudo-random filler derived from `(seed, prompt)`.
#[derive(Debug)]
pub struct MockLlm {
    model: String,
    by_prompt: HashMap<String, String>,
    script: Mutex<VecDeque<String>>,
    canned: Option<String>,
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            by_prompt: HashMap::new(),
            script: Mutex::new(VecDeque::new()),
            canned: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn canned(model: impl Into<String>, completion: impl Into<String>) -> Self {
        let mut m = Self::new(model);
        m.canned = Some(completion.into());
        m
    }

    pub fn scripted<I, S>(model: impl Into<String>, completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let m = Self::new(model);
        m.script
            .lock()
            .unwrap()
            .extend(completions.into_iter().map(Into::into));
        m
    }

    pub fn with_response(mut self, prompt: impl Into<String>, completion: impl Into<String>) -> Self {
        self.by_prompt.insert(prompt.into(), completion.into());
        self
    }

    /// Number of `generate_text` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for MockLlm {
    fn model(&self) -> &str {
        &self.model
    }

    fn generate_text(&self, prompt: &str, params: &GenerateParams) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(text) = self.by_prompt.get(prompt) {
            return Ok(text.clone());
        }
        {
            let mut script = self.script.lock().unwrap();
            if script.len() > 1 {
                return Ok(script.pop_front().unwrap());
            }
            if let Some(last) = script.front() {
                return Ok(last.clone());
            }
        }
        if let Some(text) = &self.canned {
            return Ok(text.clone());
        }
        let mut rng = seeded_rng(params.seed.unwrap_or(0), &[prompt]);
        let words: Vec<&str> = (0..12).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
        Ok(words.join(" "))
    }
}

/// What a mock likelihood backend answers for one key.
#[derive(Debug, Clone, PartialEq)]
pub enum MockResponse {
    Probability(f64),
    Logprobs { yes: f64, no: f64 },
    Answer(String),
    /// Simulates a dead endpoint.
    Unreachable,
}

type Rule = Box<dyn Fn(&str, &str) -> Option<MockResponse> + Send + Sync>;

/// Likelihood backend answering from a table keyed by
/// `(image_id, question_hash)`.
///
/// Keys missing from the table fall through to the rule closure, then to
/// seeded uniform noise if configured, then to `p_yes = 0.5`.
pub struct MockVlm {
    model: String,
    table: HashMap<(String, String), MockResponse>,
    rule: Option<Rule>,
    noise_seed: Option<u64>,
    delay: Option<Duration>,
    calls: AtomicUsize,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl std::fmt::Debug for MockVlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockVlm")
            .field("model", &self.model)
            .field("entries", &self.table.len())
            .field("rule", &self.rule.is_some())
            .field("noise_seed", &self.noise_seed)
            .finish()
    }
}

impl MockVlm {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            table: HashMap::new(),
            rule: None,
            noise_seed: None,
            delay: None,
            calls: AtomicUsize::new(0),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn insert(&mut self, image_id: &str, question: &str, response: MockResponse) {
        self.table
            .insert((image_id.to_string(), question_hash(question)), response);
    }

    pub fn with_entry(mut self, image_id: &str, question: &str, response: MockResponse) -> Self {
        self.insert(image_id, question, response);
        self
    }

    /// Fallback computed from `(image_id, question)`.
    pub fn with_rule<F>(mut self, rule: F) -> Self
    where
        F: Fn(&str, &str) -> Option<MockResponse> + Send + Sync + 'static,
    {
        self.rule = Some(Box::new(rule));
        self
    }

    /// Unknown keys get i.i.d. uniform `p_yes`, reproducible from the seed.
    pub fn with_noise(mut self, seed: u64) -> Self {
        self.noise_seed = Some(seed);
        self
    }

    /// Sleep inside every query, for concurrency tests.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of queries observed in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn respond(&self, image_id: &str, question: &str) -> MockResponse {
        if let Some(r) = self.table.get(&(image_id.to_string(), question_hash(question))) {
            return r.clone();
        }
        if let Some(r) = self.rule.as_ref().and_then(|rule| rule(image_id, question)) {
            return r;
        }
        if let Some(seed) = self.noise_seed {
            let mut rng = seeded_rng(seed, &[image_id, question]);
            return MockResponse::Probability(rng.gen::<f64>());
        }
        MockResponse::Probability(0.5)
    }
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl VlmClient for MockVlm {
    fn model(&self) -> &str {
        &self.model
    }

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = ActiveGuard(&self.active);
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            thread::sleep(d);
        }

        let id = image.id();
        match (self.respond(id, question), mode) {
            (MockResponse::Unreachable, _) => Err(GatewayError::EndpointUnreachable {
                endpoint: self.model.clone(),
                attempts: 1,
                last_error: "mock endpoint marked unreachable".into(),
            }),
            (MockResponse::Probability(p), LikelihoodMode::Logprob) => {
                Ok(LikelihoodRecord::from_probability(id, question, &self.model, p))
            }
            (MockResponse::Probability(p), LikelihoodMode::BinaryText) => {
                let answer = if p > 0.5 { "Yes" } else { "No" };
                LikelihoodRecord::from_answer(id, question, &self.model, answer)
            }
            (MockResponse::Logprobs { yes, no }, LikelihoodMode::Logprob) => {
                LikelihoodRecord::from_logprobs(id, question, &self.model, yes, no)
            }
            (MockResponse::Logprobs { yes, no }, LikelihoodMode::BinaryText) => {
                let answer = if yes > no { "Yes" } else { "No" };
                LikelihoodRecord::from_answer(id, question, &self.model, answer)
            }
            (MockResponse::Answer(text), LikelihoodMode::BinaryText) => {
                LikelihoodRecord::from_answer(id, question, &self.model, &text)
            }
            (MockResponse::Answer(_), LikelihoodMode::Logprob) => Err(GatewayError::LogprobsMissing {
                endpoint: self.model.clone(),
            }),
        }
    }
}

/// Builds a mock likelihood backend from `(image_id, question_hash) -> p_yes`.
///
/// Unknown keys answer 0.5.
pub fn make_mock_vlm(
    model: impl Into<String>,
    score_table: HashMap<(String, String), f64>,
) -> Result<MockVlm, GatewayError> {
    let model = model.into();
    if let Some(((img, q), p)) = score_table.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(GatewayError::InvalidEndpoint {
            endpoint: model,
            reason: format!("mock score for ({img}, {q}) is {p}, outside [0, 1]"),
        });
    }
    let mut vlm = MockVlm::new(model);
    vlm.table = score_table
        .into_iter()
        .map(|(k, p)| (k, MockResponse::Probability(p)))
        .collect();
    Ok(vlm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(tag: &str) -> ImageInput {
        ImageInput::from_bytes(tag.as_bytes().to_vec())
    }

    #[test]
    fn canned_completion() {
        let llm = MockLlm::canned("mock-llm", "PONG");
        let out = llm.generate_text("PING", &GenerateParams::default()).unwrap();
        assert_eq!(out, "PONG");
        assert_eq!(llm.calls(), 1);
    }

    #[test]
    fn seeded_llm_is_deterministic() {
        let params = GenerateParams {
            seed: Some(7),
            ..Default::default()
        };
        let a = MockLlm::new("m").generate_text("describe", &params).unwrap();
        let b = MockLlm::new("m").generate_text("describe", &params).unwrap();
        assert_eq!(a, b);
        let other = GenerateParams {
            seed: Some(8),
            ..Default::default()
        };
        let c = MockLlm::new("m").generate_text("describe", &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn script_then_repeat_last() {
        let llm = MockLlm::scripted("m", ["one", "two"]);
        let p = GenerateParams::default();
        assert_eq!(llm.generate_text("x", &p).unwrap(), "one");
        assert_eq!(llm.generate_text("x", &p).unwrap(), "two");
        assert_eq!(llm.generate_text("x", &p).unwrap(), "two");
    }

    #[test]
    fn table_lookup_and_default() {
        let a = img("A");
        let table = HashMap::from([((a.id().to_string(), question_hash("q1")), 0.9)]);
        let vlm = make_mock_vlm("mock-vlm", table).unwrap();
        let hit = vlm.query_likelihood(&a, "q1", LikelihoodMode::Logprob).unwrap();
        assert_eq!(hit.p_yes, 0.9);
        let again = vlm.query_likelihood(&a, "q1", LikelihoodMode::Logprob).unwrap();
        assert_eq!(hit, again);
        let miss = vlm.query_likelihood(&a, "q2", LikelihoodMode::Logprob).unwrap();
        assert_eq!(miss.p_yes, 0.5);
        assert_eq!(vlm.calls(), 3);
    }

    #[test]
    fn out_of_range_table_rejected() {
        let table = HashMap::from([(("i".to_string(), "q".to_string()), 1.5)]);
        assert!(make_mock_vlm("m", table).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let a = img("A");
        let v1 = MockVlm::new("m").with_noise(3);
        let v2 = MockVlm::new("m").with_noise(3);
        let r1 = v1.query_likelihood(&a, "q", LikelihoodMode::Logprob).unwrap();
        let r2 = v2.query_likelihood(&a, "q", LikelihoodMode::Logprob).unwrap();
        assert_eq!(r1.p_yes.to_bits(), r2.p_yes.to_bits());
    }

    #[test]
    fn binary_mode_thresholds() {
        let a = img("A");
        let vlm = MockVlm::new("m")
            .with_entry(a.id(), "hi", MockResponse::Probability(0.8))
            .with_entry(a.id(), "lo", MockResponse::Probability(0.2));
        let hi = vlm.query_likelihood(&a, "hi", LikelihoodMode::BinaryText).unwrap();
        let lo = vlm.query_likelihood(&a, "lo", LikelihoodMode::BinaryText).unwrap();
        assert_eq!((hi.p_yes, lo.p_yes), (1.0, 0.0));
    }

    #[test]
    fn answer_without_logprobs() {
        let a = img("A");
        let vlm = MockVlm::new("m").with_entry(a.id(), "q", MockResponse::Answer("yes".into()));
        let err = vlm.query_likelihood(&a, "q", LikelihoodMode::Logprob).unwrap_err();
        assert!(matches!(err, GatewayError::LogprobsMissing { .. }));
    }
}
