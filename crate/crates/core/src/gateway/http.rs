//! Blocking HTTP clients for the native wire contract.
//!
//! `POST {base_url}/generate` with `{"model", "prompt", "temperature",
//! "max_tokens", "seed"?}` answers `{"text"}`.
//! `POST {base_url}/likelihood` with `{"model", "image_b64", "question",
//! "mode"}` answers `{"logprob_yes", "logprob_no"}` or `{"answer"}`.

use std::thread;

use base64::Engine;
use log::{debug, warn};
use serde_json::{json, Value};

use super::{
    EndpointKind, GatewayError, GenerateParams, ImageInput, InFlightLimiter, LikelihoodMode,
    LikelihoodRecord, LlmClient, ModelEndpoint, RetryPolicy, VlmClient,
};

struct Transport {
    endpoint: ModelEndpoint,
    agent: ureq::Agent,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
}

impl Transport {
    fn new(endpoint: ModelEndpoint, kind: EndpointKind, retry: RetryPolicy) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        endpoint.expect_kind(kind)?;
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout()).build();
        let limiter = InFlightLimiter::new(endpoint.max_in_flight);
        Ok(Self {
            endpoint,
            agent,
            retry,
            limiter,
        })
    }

    fn url(&self, default_route: &str) -> String {
        let route = self.endpoint.route.as_deref().unwrap_or(default_route);
        format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), route)
    }

    /// Posts `body`, retrying transport errors and 5xx responses with
    /// exponential backoff. 4xx responses fail immediately.
    fn post(&self, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(route);
        let payload = body.to_string();
        let name = &self.endpoint.name;
        let mut last_error = String::new();
        let attempts = self.retry.max_attempts.max(1);
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.retry.backoff(attempt - 1);
                debug!("retrying {name} in {delay:?} (attempt {attempt}/{attempts})");
                thread::sleep(delay);
            }
            let outcome = {
                let _permit = self.limiter.acquire();
                let mut req = self.agent.post(&url).set("Content-Type", "application/json");
                if let Some(token) = &self.endpoint.auth_token {
                    req = req.set("Authorization", &format!("Bearer {token}"));
                }
                req.send_string(&payload)
            };
            match outcome {
                Ok(resp) => {
                    let text = resp.into_string().map_err(|e| GatewayError::ResponseMalformed {
                        endpoint: name.clone(),
                        reason: format!("unreadable body: {e}"),
                    })?;
                    return serde_json::from_str(&text).map_err(|e| GatewayError::ResponseMalformed {
                        endpoint: name.clone(),
                        reason: format!("body is not JSON: {e}"),
                    });
                }
                Err(ureq::Error::Status(status, resp)) if (400..500).contains(&status) => {
                    if status == 401 || status == 403 {
                        return Err(GatewayError::AuthFailed {
                            endpoint: name.clone(),
                            status,
                        });
                    }
                    let body = resp.into_string().unwrap_or_default();
                    return Err(GatewayError::Rejected {
                        endpoint: name.clone(),
                        status,
                        body: truncate(&body, 512),
                    });
                }
                Err(ureq::Error::Status(status, _)) => {
                    last_error = format!("HTTP {status}");
                }
                Err(ureq::Error::Transport(t)) => {
                    last_error = t.to_string();
                }
            }
            warn!("{name}: attempt {attempt}/{attempts} failed: {last_error}");
        }
        Err(GatewayError::EndpointUnreachable {
            endpoint: name.clone(),
            attempts,
            last_error,
        })
    }

    fn malformed(&self, reason: impl Into<String>) -> GatewayError {
        GatewayError::ResponseMalformed {
            endpoint: self.endpoint.name.clone(),
            reason: reason.into(),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Follows a dotted path (`choices.0.text`) into a JSON value.
pub(crate) fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').filter(|s| !s.is_empty()).try_fold(value, |v, seg| match v {
        Value::Object(map) => map.get(seg),
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// HTTP text-generation client.
pub struct HttpLlm {
    transport: Transport,
}

impl HttpLlm {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        let retry = endpoint.retry_policy();
        Self::with_retry(endpoint, retry)
    }

    pub fn with_retry(endpoint: ModelEndpoint, retry: RetryPolicy) -> Result<Self, GatewayError> {
        Ok(Self {
            transport: Transport::new(endpoint, EndpointKind::Llm, retry)?,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.transport.endpoint
    }
}

impl LlmClient for HttpLlm {
    fn model(&self) -> &str {
        self.transport.endpoint.model_name()
    }

    fn generate_text(&self, prompt: &str, params: &GenerateParams) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": self.model(),
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.transport.post("/generate", &body)?;
        let path = &self.transport.endpoint.fields.text;
        match lookup(&resp, path) {
            Some(Value::String(text)) => Ok(text.clone()),
            Some(_) => Err(self.transport.malformed(format!("`{path}` is not a string"))),
            None => Err(self.transport.malformed(format!("missing completion field `{path}`"))),
        }
    }
}

/// HTTP yes/no likelihood client.
pub struct HttpVlm {
    transport: Transport,
}

impl HttpVlm {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        let retry = endpoint.retry_policy();
        Self::with_retry(endpoint, retry)
    }

    pub fn with_retry(endpoint: ModelEndpoint, retry: RetryPolicy) -> Result<Self, GatewayError> {
        Ok(Self {
            transport: Transport::new(endpoint, EndpointKind::Vlm, retry)?,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.transport.endpoint
    }

    fn logprobs(&self, resp: &Value) -> Result<(f64, f64), GatewayError> {
        let fields = &self.transport.endpoint.fields;
        let missing = || GatewayError::LogprobsMissing {
            endpoint: self.transport.endpoint.name.clone(),
        };
        if let Some(path) = &fields.top_logprobs {
            let candidates = lookup(resp, path).and_then(Value::as_array).ok_or_else(missing)?;
            let pick = |want: &str| {
                candidates.iter().find_map(|c| {
                    let token = c.get("token")?.as_str()?;
                    if token.trim().eq_ignore_ascii_case(want) {
                        c.get("logprob")?.as_f64()
                    } else {
                        None
                    }
                })
            };
            return Ok((pick("yes").ok_or_else(missing)?, pick("no").ok_or_else(missing)?));
        }
        let yes = lookup(resp, &fields.logprob_yes).and_then(Value::as_f64);
        let no = lookup(resp, &fields.logprob_no).and_then(Value::as_f64);
        match (yes, no) {
            (Some(y), Some(n)) => Ok((y, n)),
            _ => Err(missing()),
        }
    }
}

impl VlmClient for HttpVlm {
    fn model(&self) -> &str {
        self.transport.endpoint.model_name()
    }

    fn query_likelihood(
        &self,
        image: &ImageInput,
        question: &str,
        mode: LikelihoodMode,
    ) -> Result<LikelihoodRecord, GatewayError> {
        let body = json!({
            "model": self.model(),
            "image_b64": base64::engine::general_purpose::STANDARD.encode(image.bytes()),
            "question": question,
            "mode": mode.as_str(),
        });
        let resp = self.transport.post("/likelihood", &body)?;
        match mode {
            LikelihoodMode::Logprob => {
                let (yes, no) = self.logprobs(&resp)?;
                LikelihoodRecord::from_logprobs(image.id(), question, self.model(), yes, no)
            }
            LikelihoodMode::BinaryText => {
                let path = &self.transport.endpoint.fields.answer;
                let answer = lookup(&resp, path)
                    .and_then(Value::as_str)
                    .ok_or_else(|| self.transport.malformed(format!("missing answer field `{path}`")))?;
                LikelihoodRecord::from_answer(image.id(), question, self.model(), answer)
            }
        }
    }
}
